//! The diffusion limit of the rescaled family size and its killed
//! Laplace functional.
//!
//! `Y` solves `dY = sqrt(2) dB` in `d = 1` and `dY = sqrt(2 beta Y) dB` in
//! `d >= 2`, absorbed at 0. Paths are Euler steps of size `dt` while
//! `Y <= eps`, doubled for every doubling of `Y` above `eps` (quadrupled in
//! `d = 1`, where the step has to scale like `Y^2`). Crossings of 0 inside a
//! step are caught with the frozen-coefficient Brownian bridge.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{self, AnalyticError};
use crate::replica::par_replicas;
use crate::stats;

/// Default `dt / eps`.
pub const DT_PER_EPS: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 1e4;
/// `F` stops a path once `c * int Y ds` exceeds this; the remaining weight is below `e^-40`.
pub const INTEGRAL_CAP: f64 = 40.0;
/// Largest `c * Y * step` allowed while a killing rate is active.
const MAX_KILL_PER_STEP: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid diffusion parameters: {0}")]
    InvalidParams(String),
    #[error("path still alive at the horizon {horizon} (Y = {y}, integral = {integral})")]
    Horizon { horizon: f64, y: f64, integral: f64 },
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error("{0}")]
    Stats(#[from] stats::StatsError),
}

fn invalid(msg: impl Into<String>) -> DiffusionError {
    DiffusionError::InvalidParams(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionParams {
    pub d: usize,
    /// Ignored in `d = 1`.
    pub beta: f64,
    pub eps: f64,
    pub dt: f64,
    /// `c` in `exp(-c int Y ds)`.
    pub kill_rate_scale: f64,
    pub horizon: f64,
}

impl DiffusionParams {
    /// Default step `eps * 1e-3`, `c = 1`, horizon `1e4`.
    pub fn new(d: usize, eps: f64, beta: f64) -> Self {
        DiffusionParams {
            d,
            beta,
            eps,
            dt: eps * DT_PER_EPS,
            kill_rate_scale: 1.0,
            horizon: DEFAULT_HORIZON,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_kill(mut self, c: f64) -> Self {
        self.kill_rate_scale = c;
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(1..=3).contains(&self.d) {
            return Err(invalid(format!("dimension {} not in 1..=3", self.d)));
        }
        if self.d >= 2 && !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta = {} must be positive", self.beta)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid(format!("eps = {} must be positive", self.eps)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.kill_rate_scale >= 0.0 && self.kill_rate_scale.is_finite()) {
            return Err(invalid(format!("kill rate scale = {} must be >= 0", self.kill_rate_scale)));
        }
        if !(self.horizon > 0.0) {
            return Err(invalid(format!("horizon = {} must be positive", self.horizon)));
        }
        Ok(())
    }

    fn variance_rate(&self, y: f64) -> f64 {
        if self.d == 1 {
            2.0
        } else {
            2.0 * self.beta * y
        }
    }

    fn step_size(&self, y: f64) -> f64 {
        if y <= self.eps {
            return self.dt;
        }
        let j = (y / self.eps).log2().floor().min(60.0) as i32;
        if self.d == 1 {
            self.dt * 4f64.powi(j)
        } else {
            self.dt * 2f64.powi(j)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathStop {
    Absorbed,
    /// `c * int Y ds` passed the cap.
    Killed,
    /// Reached the requested upper level.
    Reached,
    /// Ran to the requested time without absorption.
    TimeUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub t: f64,
    pub integral: f64,
    pub y: f64,
    pub stop: PathStop,
}

/// Where to stop a path besides absorption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathLimits {
    pub time: f64,
    pub level: f64,
    pub integral_cap: f64,
}

impl PathLimits {
    pub fn until_absorbed(horizon: f64) -> Self {
        PathLimits {
            time: horizon,
            level: f64::INFINITY,
            integral_cap: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct State {
    y: f64,
    t: f64,
    integral: f64,
}

impl State {
    fn summary(self, stop: PathStop) -> PathSummary {
        PathSummary { t: self.t, integral: self.integral, y: self.y, stop }
    }
}

/// Length of the next step from `s`, or the limit that stops the path.
fn next_step(p: &DiffusionParams, s: &State, limits: &PathLimits) -> Result<f64, PathStop> {
    let c = p.kill_rate_scale;
    if s.y >= limits.level {
        return Err(PathStop::Reached);
    }
    if s.t >= limits.time {
        return Err(PathStop::TimeUp);
    }
    if c * s.integral > limits.integral_cap {
        return Err(PathStop::Killed);
    }
    let mut h = p.step_size(s.y);
    if c > 0.0 {
        h = h.min(MAX_KILL_PER_STEP / (c * s.y));
    }
    Ok(h.min(limits.time - s.t))
}

/// One Euler step of length `h` driven by the Brownian increment `dw`. An
/// upper crossing inside the step also counts, and leaves `y` at the level.
fn apply_step<R: Rng + ?Sized>(
    p: &DiffusionParams,
    s: &mut State,
    limits: &PathLimits,
    h: f64,
    dw: f64,
    rng: &mut R,
) -> Option<PathStop> {
    let y = s.y;
    let var = p.variance_rate(y) * h;
    let next = y + p.variance_rate(y).sqrt() * dw;
    if next <= 0.0 || rng.gen::<f64>() < (-2.0 * y * next / var).exp() {
        // Straight line to 0, through the reflected end point if needed.
        let frac = y / (y + next.abs());
        s.t += frac * h;
        s.integral += 0.5 * y * frac * h;
        s.y = 0.0;
        return Some(PathStop::Absorbed);
    }
    if limits.level.is_finite() && next < limits.level {
        let gap = (limits.level - y) * (limits.level - next);
        if rng.gen::<f64>() < (-2.0 * gap / var).exp() {
            s.t += 0.5 * h;
            s.integral += 0.25 * (y + limits.level) * h;
            s.y = limits.level;
            return Some(PathStop::Reached);
        }
    }
    s.integral += 0.5 * (y + next) * h;
    s.t += h;
    s.y = next;
    None
}

fn advance<R: Rng + ?Sized>(p: &DiffusionParams, s: &mut State, limits: PathLimits, rng: &mut R) -> PathStop {
    loop {
        let h = match next_step(p, s, &limits) {
            Ok(h) => h,
            Err(stop) => return stop,
        };
        let z: f64 = rng.sample(StandardNormal);
        if let Some(stop) = apply_step(p, s, &limits, h, h.sqrt() * z, rng) {
            return stop;
        }
    }
}

/// A Brownian path revealed on demand, refined by bridge sampling. Points
/// before `prune`'s cut are dropped, keeping one anchor.
struct LazyBrownian {
    pts: Vec<(f64, f64)>,
}

impl LazyBrownian {
    fn new() -> Self {
        LazyBrownian { pts: vec![(0.0, 0.0)] }
    }

    fn at<R: Rng + ?Sized>(&mut self, t: f64, rng: &mut R) -> f64 {
        let i = self.pts.partition_point(|q| q.0 < t);
        if i < self.pts.len() && self.pts[i].0 == t {
            return self.pts[i].1;
        }
        let z: f64 = rng.sample(StandardNormal);
        if i == self.pts.len() {
            let (t0, w0) = self.pts[i - 1];
            let w = w0 + (t - t0).sqrt() * z;
            self.pts.push((t, w));
            return w;
        }
        let ((t0, w0), (t1, w1)) = (self.pts[i - 1], self.pts[i]);
        let mean = w0 + (t - t0) / (t1 - t0) * (w1 - w0);
        let w = mean + ((t - t0) * (t1 - t) / (t1 - t0)).sqrt() * z;
        self.pts.insert(i, (t, w));
        w
    }

    fn prune(&mut self, t: f64) {
        let i = self.pts.partition_point(|q| q.0 <= t);
        if i > 1 {
            self.pts.drain(..i - 1);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub f_coarse: f64,
    pub f_fine: f64,
    pub f_stderr: f64,
    /// Mean of `X(dt/2) - X(dt)` over coupled pairs and its standard error.
    pub diff: f64,
    pub diff_stderr: f64,
    pub reps: usize,
}

/// `F` at `dt` and `dt/2` with both paths of a pair driven by the same
/// Brownian motion, so the difference is resolved far below the noise of
/// either estimate.
pub fn f_eps_refinement(p: &DiffusionParams, reps: usize, seed: u64) -> Result<Refinement, DiffusionError> {
    if reps < 2 {
        return Err(invalid("refinement needs at least 2 pairs"));
    }
    p.validate()?;
    let c = p.kill_rate_scale;
    let fine = p.clone().with_dt(p.dt / 2.0);
    let limits = PathLimits {
        integral_cap: INTEGRAL_CAP,
        ..PathLimits::until_absorbed(p.horizon)
    };
    let out = par_replicas::<_, DiffusionError, _>(seed, reps, |_, rng| {
        let mut w = LazyBrownian::new();
        let mut paths = [(p, State { y: p.eps, t: 0.0, integral: 0.0 }, None), (&fine, State { y: p.eps, t: 0.0, integral: 0.0 }, None)];
        loop {
            let Some(k) = (0..2).filter(|&k| paths[k].2.is_none()).min_by(|&a, &b| paths[a].1.t.total_cmp(&paths[b].1.t)) else {
                break;
            };
            let (q, ref mut s, ref mut stop) = paths[k];
            match next_step(q, s, &limits) {
                Err(e) => *stop = Some(e),
                Ok(h) => {
                    let dw = w.at(s.t + h, rng) - w.at(s.t, rng);
                    *stop = apply_step(q, s, &limits, h, dw, rng);
                }
            }
            let live = paths.iter().filter(|x| x.2.is_none()).map(|x| x.1.t).fold(f64::INFINITY, f64::min);
            if live.is_finite() {
                w.prune(live);
            }
        }
        let x = |s: &State| -(-c * s.integral).exp_m1();
        Ok((x(&paths[0].1), x(&paths[1].1)))
    })?;
    let coarse: Vec<f64> = out.iter().map(|x| x.0).collect();
    let fine_x: Vec<f64> = out.iter().map(|x| x.1).collect();
    let diffs: Vec<f64> = out.iter().map(|x| x.1 - x.0).collect();
    let (f_coarse, f_stderr) = stats::mean_stderr(&coarse)?;
    let (f_fine, _) = stats::mean_stderr(&fine_x)?;
    let (diff, diff_stderr) = stats::mean_stderr(&diffs)?;
    Ok(Refinement { f_coarse, f_fine, f_stderr, diff, diff_stderr, reps })
}

/// One path from `Y = eps` until absorption or one of the limits.
pub fn run_path<R: Rng + ?Sized>(p: &DiffusionParams, limits: PathLimits, rng: &mut R) -> PathSummary {
    let mut s = State { y: p.eps, t: 0.0, integral: 0.0 };
    let stop = advance(p, &mut s, limits, rng);
    s.summary(stop)
}

/// Absorption time and `int_0^T0 Y ds` of one path.
pub fn simulate_path<R: Rng + ?Sized>(p: &DiffusionParams, rng: &mut R) -> Result<(f64, f64), DiffusionError> {
    if p.eps == 0.0 {
        return Ok((0.0, 0.0));
    }
    p.validate()?;
    let s = run_path(p, PathLimits::until_absorbed(p.horizon), rng);
    match s.stop {
        PathStop::Absorbed => Ok((s.t, s.integral)),
        _ => Err(DiffusionError::Horizon {
            horizon: p.horizon,
            y: s.y,
            integral: s.integral,
        }),
    }
}

/// `Y` at `t ∧ T0`.
pub fn value_at<R: Rng + ?Sized>(p: &DiffusionParams, t: f64, rng: &mut R) -> Result<f64, DiffusionError> {
    p.validate()?;
    let limits = PathLimits { time: t, ..PathLimits::until_absorbed(t) };
    Ok(run_path(p, limits, rng).y)
}

/// Whether the path reaches `level` before 0.
pub fn reaches_level<R: Rng + ?Sized>(p: &DiffusionParams, level: f64, rng: &mut R) -> Result<bool, DiffusionError> {
    p.validate()?;
    let limits = PathLimits {
        level,
        ..PathLimits::until_absorbed(p.horizon)
    };
    match run_path(p, limits, rng).stop {
        PathStop::Reached => Ok(true),
        PathStop::Absorbed => Ok(false),
        _ => Err(DiffusionError::Horizon {
            horizon: p.horizon,
            y: f64::NAN,
            integral: f64::NAN,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FEstimate {
    pub eps: f64,
    pub f: f64,
    pub stderr: f64,
    pub reps: usize,
    /// Paths cut off at the horizon; they contribute their truncated integral.
    pub horizon_hits: usize,
}

impl FEstimate {
    pub fn f_over_eps(&self) -> f64 {
        self.f / self.eps
    }
}

/// Monte Carlo `F(eps) = 1 - E_eps exp(-c int_0^T0 Y ds)`.
pub fn f_eps(p: &DiffusionParams, reps: usize, seed: u64) -> Result<FEstimate, DiffusionError> {
    if reps < 2 {
        return Err(invalid("F needs at least 2 paths"));
    }
    if p.eps == 0.0 || p.kill_rate_scale == 0.0 {
        return Ok(FEstimate { eps: p.eps, f: 0.0, stderr: 0.0, reps, horizon_hits: 0 });
    }
    p.validate()?;
    let c = p.kill_rate_scale;
    let limits = PathLimits {
        integral_cap: INTEGRAL_CAP,
        ..PathLimits::until_absorbed(p.horizon)
    };
    let out = par_replicas::<_, DiffusionError, _>(seed, reps, |_, rng| {
        let s = run_path(p, limits, rng);
        Ok((-(-c * s.integral).exp_m1(), s.stop == PathStop::TimeUp))
    })?;
    let vals: Vec<f64> = out.iter().map(|x| x.0).collect();
    let (f, stderr) = stats::mean_stderr(&vals)?;
    Ok(FEstimate {
        eps: p.eps,
        f,
        stderr,
        reps,
        horizon_hits: out.iter().filter(|x| x.1).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuEpsPrediction {
    pub u2: f64,
    /// `1 / h_d(u2)`.
    pub n: f64,
    /// `n a_n u2`.
    pub c: f64,
    pub f: FEstimate,
    pub nu_eps: f64,
    pub stderr: f64,
}

/// `nu^eps = F(eps) / (n eps)` with `n = 1/h_d(u2)` and `c = n a_n u2`.
pub fn nu_epsilon_prediction(
    d: usize,
    u2: f64,
    eps: f64,
    beta: f64,
    reps: usize,
    seed: u64,
) -> Result<NuEpsPrediction, DiffusionError> {
    if !(u2 > 0.0 && u2 < 1.0) {
        return Err(invalid(format!("u2 = {u2} must lie in (0, 1)")));
    }
    let n = 1.0 / analytic::h_d(d, u2)?;
    let c = n * analytic::a_n(d, n)? * u2;
    let p = DiffusionParams::new(d, eps, beta).with_kill(c);
    let f = f_eps(&p, reps, seed)?;
    let scale = 1.0 / (n * eps);
    Ok(NuEpsPrediction {
        u2,
        n,
        c,
        nu_eps: f.f * scale,
        stderr: f.stderr * scale,
        f,
    })
}

/// `-v'(0)` for `v'' = x v`, `v(0) = 1`, `v(x_max) = Ai(x_max)/Ai(0)`, by
/// Numerov on `intervals` equal steps.
pub fn airy_bvp_slope(x_max: f64, intervals: usize) -> Result<f64, DiffusionError> {
    if !(x_max > 0.0) || intervals < 4 {
        return Err(invalid("BVP needs x_max > 0 and at least 4 intervals"));
    }
    let n = intervals;
    let h = x_max / n as f64;
    let k = h * h / 12.0;
    let right = analytic::airy_ai(x_max)? / analytic::airy_ai_zero();
    // Unknowns v_1 .. v_{n-1}; row i reads
    // (1 - k x_{i-1}) v_{i-1} - (2 + 10 k x_i) v_i + (1 - k x_{i+1}) v_{i+1} = 0.
    let m = n - 1;
    let x = |i: usize| i as f64 * h;
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut lower = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for r in 0..m {
        let i = r + 1;
        lower[r] = 1.0 - k * x(i - 1);
        diag[r] = -(2.0 + 10.0 * k * x(i));
        upper[r] = 1.0 - k * x(i + 1);
    }
    rhs[0] -= lower[0];
    rhs[m - 1] -= upper[m - 1] * right;
    // Thomas sweep.
    for r in 1..m {
        let w = lower[r] / diag[r - 1];
        diag[r] -= w * upper[r - 1];
        rhs[r] -= w * rhs[r - 1];
    }
    let mut v = vec![0.0; m];
    v[m - 1] = rhs[m - 1] / diag[m - 1];
    for r in (0..m - 1).rev() {
        v[r] = (rhs[r] - upper[r] * v[r + 1]) / diag[r];
    }
    // v(h) = 1 + h v'(0) + h^3/6 + h^4 v'(0)/12 + O(h^5).
    let slope = (v[0] - 1.0 - h * h * h / 6.0) / (h + h.powi(4) / 12.0);
    Ok(-slope)
}
