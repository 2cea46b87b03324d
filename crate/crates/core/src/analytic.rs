//! Closed-form predictions: scaling functions, time scales, the tunneling
//! constants `gamma_d`, waiting-time rates and biased hitting probabilities.
//!
//! Logarithms are natural throughout. Time is measured on the engine clock,
//! where the neutral `d = 1` family size jumps at total rate 2.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticError {
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("hitting problem needs integers a < x < b (got a={a}, x={x}, b={b})")]
    BadInterval { a: i64, x: i64, b: i64 },
}

fn domain(what: &'static str, value: f64) -> AnalyticError {
    AnalyticError::Domain { what, value }
}

fn check_dim(d: usize) -> Result<(), AnalyticError> {
    if (1..=3).contains(&d) {
        Ok(())
    } else {
        Err(domain("dimension", d as f64))
    }
}

fn check_rate(u: f64) -> Result<(), AnalyticError> {
    if u > 0.0 && u < 1.0 {
        Ok(())
    } else {
        Err(domain("mutation rate (need 0 < u < 1)", u))
    }
}

/// Order of the tunneling probability: `u^(1/3)`, `sqrt(u ln(1/u))`, `sqrt(u)`.
pub fn h_d(d: usize, u: f64) -> Result<f64, AnalyticError> {
    check_dim(d)?;
    check_rate(u)?;
    Ok(match d {
        1 => u.cbrt(),
        2 => (u * (1.0 / u).ln()).sqrt(),
        _ => u.sqrt(),
    })
}

/// Scale on the right-hand side of the regime condition `N << g_d(u2)/u1`.
pub fn g_d(d: usize, u: f64) -> Result<f64, AnalyticError> {
    check_dim(d)?;
    check_rate(u)?;
    Ok(match d {
        1 => u.cbrt(),
        2 => (1.0 / u).ln().powf(-0.5),
        _ => 1.0,
    })
}

/// Time needed by a family of size `n` to change size by order `n`.
pub fn a_n(d: usize, n: f64) -> Result<f64, AnalyticError> {
    check_dim(d)?;
    let ok = if d == 2 { n > 1.0 } else { n > 0.0 };
    if !ok || !n.is_finite() {
        return Err(domain("size scale n", n));
    }
    Ok(match d {
        1 => n * n,
        2 => 2.0 * n * n.ln(),
        _ => n,
    })
}

/// `Ai(0) = 3^(-2/3) / Gamma(2/3)`.
pub fn airy_ai_zero() -> f64 {
    3f64.powf(-2.0 / 3.0) / gamma(2.0 / 3.0)
}

/// `Ai'(0) = -3^(-1/3) / Gamma(1/3)`.
pub fn airy_ai_prime_zero() -> f64 {
    -(3f64.powf(-1.0 / 3.0)) / gamma(1.0 / 3.0)
}

/// Below this the Maclaurin series is used, above it the asymptotic expansion.
/// At 5 the series cancellation error and the optimally truncated asymptotic
/// remainder are both below 1e-10.
const AIRY_SWITCH: f64 = 5.0;
const AIRY_MAX: f64 = 40.0;

fn check_airy_arg(x: f64) -> Result<(), AnalyticError> {
    if (0.0..=AIRY_MAX).contains(&x) {
        Ok(())
    } else {
        Err(domain("Airy argument (need 0 <= x <= 40)", x))
    }
}

pub fn airy_ai(x: f64) -> Result<f64, AnalyticError> {
    check_airy_arg(x)?;
    Ok(ai_unchecked(x))
}

pub fn airy_ai_prime(x: f64) -> Result<f64, AnalyticError> {
    check_airy_arg(x)?;
    Ok(ai_prime_unchecked(x))
}

/// `Ai(x)` for any `x >= 0`; underflows gracefully to 0.
pub(crate) fn ai_unchecked(x: f64) -> f64 {
    if x < AIRY_SWITCH {
        let (f, g, _, _) = airy_series(x);
        airy_ai_zero() * f + airy_ai_prime_zero() * g
    } else {
        let (s, _) = airy_asymptotic(x);
        s
    }
}

pub(crate) fn ai_prime_unchecked(x: f64) -> f64 {
    if x < AIRY_SWITCH {
        let (_, _, fp, gp) = airy_series(x);
        airy_ai_zero() * fp + airy_ai_prime_zero() * gp
    } else {
        let (_, d) = airy_asymptotic(x);
        d
    }
}

/// The two Maclaurin solutions `f`, `g` of `y'' = x y` with `f(0)=1, f'(0)=0`
/// and `g(0)=0, g'(0)=1`, together with their derivatives.
fn airy_series(x: f64) -> (f64, f64, f64, f64) {
    let x3 = x * x * x;
    let (mut f, mut g) = (1.0, x);
    let (mut fp, mut gp) = (x * x / 2.0, 1.0);
    let (mut tf, mut tg, mut tfp, mut tgp) = (1.0, x, x * x / 2.0, 1.0);
    for k in 1..200 {
        let k = k as f64;
        tf *= x3 / ((3.0 * k - 1.0) * (3.0 * k));
        tg *= x3 / ((3.0 * k) * (3.0 * k + 1.0));
        tgp *= x3 / ((3.0 * k - 2.0) * (3.0 * k));
        f += tf;
        g += tg;
        gp += tgp;
        if k >= 2.0 {
            tfp *= x3 / ((3.0 * k - 1.0) * (3.0 * k - 3.0));
            fp += tfp;
        }
        let scale = f.abs() + g.abs() + fp.abs() + gp.abs();
        if tf.abs() + tg.abs() + tfp.abs() + tgp.abs() < 1e-18 * scale {
            break;
        }
    }
    (f, g, fp, gp)
}

/// Optimally truncated large-argument expansions of `Ai` and `Ai'`.
fn airy_asymptotic(x: f64) -> (f64, f64) {
    let zeta = 2.0 / 3.0 * x.powf(1.5);
    let pre = (-zeta).exp() / (2.0 * PI.sqrt());
    let q = x.powf(0.25);
    let (mut su, mut sv) = (1.0, 1.0);
    let mut u = 1.0;
    let mut last = f64::INFINITY;
    let mut zk = 1.0;
    for k in 1..60 {
        let kf = k as f64;
        u *= (6.0 * kf - 5.0) * (6.0 * kf - 3.0) * (6.0 * kf - 1.0) / ((2.0 * kf - 1.0) * 216.0 * kf);
        let v = -(6.0 * kf + 1.0) / (6.0 * kf - 1.0) * u;
        zk *= zeta;
        let term = u / zk;
        if term.abs() >= last {
            break;
        }
        last = term.abs();
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        su += sign * term;
        sv += sign * v / zk;
        if term.abs() < 1e-17 {
            break;
        }
    }
    (pre / q * su, -pre * q * sv)
}

/// `gamma_1 = 3^(1/3) Gamma(2/3) / Gamma(1/3)`; `gamma_d = beta^(-1/2)` for `d >= 2`.
pub fn gamma_d(d: usize, beta: f64) -> Result<f64, AnalyticError> {
    check_dim(d)?;
    if d == 1 {
        return Ok(3f64.cbrt() * gamma(2.0 / 3.0) / gamma(1.0 / 3.0));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(domain("beta", beta));
    }
    Ok(beta.powf(-0.5))
}

/// `v(x) = E_x exp(-int_0^T0 Y ds)` for the limiting diffusion.
pub fn v_of_x(d: usize, x: f64, beta: f64) -> Result<f64, AnalyticError> {
    laplace_functional(d, x, 1.0, beta)
}

/// `E_x exp(-c int_0^T0 Y ds)`: `Ai(c^(1/3) x)/Ai(0)` in `d = 1`,
/// `exp(-sqrt(c/beta) x)` in `d >= 2`.
pub fn laplace_functional(d: usize, x: f64, c: f64, beta: f64) -> Result<f64, AnalyticError> {
    check_dim(d)?;
    if !(x >= 0.0) {
        return Err(domain("starting point x", x));
    }
    if !(c >= 0.0) || !c.is_finite() {
        return Err(domain("killing coefficient c", c));
    }
    if d == 1 {
        return Ok(ai_unchecked(c.cbrt() * x) / airy_ai_zero());
    }
    if !(beta > 0.0) {
        return Err(domain("beta", beta));
    }
    Ok((-(c / beta).sqrt() * x).exp())
}

/// Regime check for the waiting-time law: `1/h_d(u2) << N << g_d(u2)/u1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeDiagnostics {
    pub inv_h: f64,
    pub n_sites: f64,
    pub g_over_u1: f64,
    /// Plain ordering `inv_h < N < g/u1`; how much "<<" holds is the caller's call.
    pub ordered: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau2Rate {
    pub rate: f64,
    pub regime: RegimeDiagnostics,
}

/// Predicted rate `N u1 gamma_d h_d(u2)` of the exponential law of `tau_2`.
pub fn tau2_rate(n_sites: f64, u1: f64, u2: f64, d: usize, beta: f64) -> Result<Tau2Rate, AnalyticError> {
    if !(n_sites >= 1.0) {
        return Err(domain("population size N", n_sites));
    }
    if !(0.0..1.0).contains(&u1) {
        return Err(domain("u1", u1));
    }
    let h = h_d(d, u2)?;
    let g = g_d(d, u2)?;
    let gam = gamma_d(d, beta)?;
    let inv_h = 1.0 / h;
    let g_over_u1 = if u1 > 0.0 { g / u1 } else { f64::INFINITY };
    Ok(Tau2Rate {
        rate: n_sites * u1 * gam * h,
        regime: RegimeDiagnostics {
            inv_h,
            n_sites,
            g_over_u1,
            ordered: inv_h < n_sites && n_sites < g_over_u1,
        },
    })
}

/// Below this `|lambda - 1|` the neutral formula is used.
pub const NEUTRAL_SWITCH: f64 = 1e-8;

/// `P_x(T_b < T_a)` for the walk stepping up with probability `lambda/(1+lambda)`:
/// `(theta^x - theta^a)/(theta^b - theta^a)` with `theta = 1/lambda`.
pub fn hit_prob(lambda: f64, x: i64, a: i64, b: i64) -> Result<f64, AnalyticError> {
    if !(a < x && x < b) {
        return Err(AnalyticError::BadInterval { a, x, b });
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(domain("lambda", lambda));
    }
    let (dx, db) = ((x - a) as f64, (b - a) as f64);
    let ln_theta = -lambda.ln();
    if (lambda - 1.0).abs() < NEUTRAL_SWITCH {
        // First-order expansion in ln(theta) keeps the two branches continuous.
        return Ok(dx / db * (1.0 + 0.5 * (dx - db) * ln_theta));
    }
    // Divide through by theta^a; expm1 keeps precision for theta near 1.
    Ok((dx * ln_theta).exp_m1() / (db * ln_theta).exp_m1())
}

/// `sup |P_0(T_b < T_a) / (-a/(b-a)) - 1|` over integers `-K <= a <= -1`,
/// `1 <= b <= K` with `K = floor(c / h)`.
pub fn uniform_neutrality_gap(lambda: f64, c: f64, h: f64) -> Result<f64, AnalyticError> {
    if !(c > 0.0) || !(h > 0.0) {
        return Err(domain("C/h", c / h));
    }
    let k = (c / h).floor() as i64;
    if k < 1 {
        return Ok(0.0);
    }
    let mut worst: f64 = 0.0;
    for a in -k..=-1 {
        for b in 1..=k {
            let p = hit_prob(lambda, 0, a, b)?;
            let neutral = -a as f64 / (b - a) as f64;
            worst = worst.max((p / neutral - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Every closed-form quantity for one parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub d: usize,
    pub u1: f64,
    pub u2: f64,
    pub n_sites: f64,
    pub h: f64,
    pub g: f64,
    /// Family size scale `n = 1/h_d(u2)` at which the type-2 mutation appears.
    pub n: f64,
    /// `a_n` evaluated at that `n`.
    pub a_n: f64,
    pub beta: f64,
    pub gamma: f64,
    pub nu_pred: f64,
    pub rate: f64,
    pub mean_tau2: f64,
    pub regime: RegimeDiagnostics,
}

impl Predictions {
    /// `beta` is ignored in `d = 1`.
    pub fn compute(d: usize, n_sites: f64, u1: f64, u2: f64, beta: f64) -> Result<Self, AnalyticError> {
        let h = h_d(d, u2)?;
        let g = g_d(d, u2)?;
        let gamma = gamma_d(d, beta)?;
        let n = 1.0 / h;
        let rate = tau2_rate(n_sites, u1, u2, d, beta)?;
        Ok(Predictions {
            d,
            u1,
            u2,
            n_sites,
            h,
            g,
            n,
            a_n: a_n(d, n)?,
            beta,
            gamma,
            nu_pred: gamma * h,
            rate: rate.rate,
            mean_tau2: 1.0 / rate.rate,
            regime: rate.regime,
        })
    }
}
