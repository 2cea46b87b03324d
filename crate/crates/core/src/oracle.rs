//! Exact computations for the family-size birth–death chain.
//!
//! Under the boundary assumption the size of a family is a birth–death chain
//! on `0..=M` with total jump rate `q(k)` at level `k`. Each quantity here is
//! produced twice: from the closed-form random-walk expressions and from a
//! dense linear solve on the (Doob-conditioned) absorbing chain. The two
//! routes share nothing but the chain definition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{self, AnalyticError};

/// Relative agreement demanded between closed forms and linear solves.
pub const AGREEMENT_TOL: f64 = 1e-10;
/// Largest chain handled by the dense solver.
pub const MAX_LEVEL: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("chain needs 2 <= M <= {MAX_LEVEL} (got {0})")]
    BadLevel(usize),
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("singular absorbing-chain system")]
    Singular,
    #[error("closed form {closed} and linear solve {solved} disagree ({what})")]
    Mismatch { what: &'static str, closed: f64, solved: f64 },
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
}

/// Birth–death chain for the family size, absorbing at `0` and `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeChain {
    pub dim: usize,
    pub max_level: usize,
    pub beta: f64,
    pub lambda: f64,
    /// `q[k]` for `k = 0..=M`; entries at the absorbing levels are unused.
    q: Vec<f64>,
}

impl SizeChain {
    /// `q(k) = 2` (d=1), `4 beta k / ln k` (d=2, `ln 2` at `k=1`), `2 d beta k` (d=3).
    pub fn new(dim: usize, max_level: usize, beta: f64, lambda: f64) -> Result<Self, OracleError> {
        if !(1..=3).contains(&dim) {
            return Err(OracleError::Domain { what: "dimension", value: dim as f64 });
        }
        if !(2..=MAX_LEVEL).contains(&max_level) {
            return Err(OracleError::BadLevel(max_level));
        }
        if dim > 1 && !(beta > 0.0) {
            return Err(OracleError::Domain { what: "beta", value: beta });
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(OracleError::Domain { what: "lambda", value: lambda });
        }
        let q = (0..=max_level)
            .map(|k| {
                let kf = k as f64;
                match dim {
                    1 => 2.0,
                    2 => 4.0 * beta * kf / (if k == 1 { 2f64.ln() } else { kf.ln() }),
                    _ => 2.0 * dim as f64 * beta * kf,
                }
            })
            .collect();
        Ok(SizeChain { dim, max_level, beta, lambda, q })
    }

    pub fn neutral(dim: usize, max_level: usize, beta: f64) -> Result<Self, OracleError> {
        Self::new(dim, max_level, beta, 1.0)
    }

    pub fn jump_rate(&self, k: usize) -> f64 {
        self.q[k]
    }

    pub fn up_rate(&self, k: usize) -> f64 {
        self.q[k] * self.lambda / (1.0 + self.lambda)
    }

    pub fn down_rate(&self, k: usize) -> f64 {
        self.q[k] / (1.0 + self.lambda)
    }

    fn is_neutral(&self) -> bool {
        self.lambda == 1.0
    }

    /// Transition matrix of the embedded jump chain restricted to `1..M`
    /// (row/column `k-1` is level `k`).
    fn transient_matrix(&self) -> DMatrix<f64> {
        let n = self.max_level - 1;
        let p = self.lambda / (1.0 + self.lambda);
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            if i + 1 < n {
                q[(i, i + 1)] = p;
            }
            if i > 0 {
                q[(i, i - 1)] = 1.0 - p;
            }
        }
        q
    }

    /// Full `(M+1) x (M+1)` jump-chain matrix with identity rows at the absorbing states.
    pub fn jump_matrix(&self) -> DMatrix<f64> {
        let m = self.max_level;
        let p = self.lambda / (1.0 + self.lambda);
        let mut full = DMatrix::zeros(m + 1, m + 1);
        full[(0, 0)] = 1.0;
        full[(m, m)] = 1.0;
        for k in 1..m {
            full[(k, k + 1)] = p;
            full[(k, k - 1)] = 1.0 - p;
        }
        full
    }
}

/// A quantity computed by both routes; `closed_form` is `None` when no
/// closed form applies (biased chains).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub closed_form: Option<f64>,
    pub linear_solve: f64,
}

impl CrossCheck {
    fn checked(what: &'static str, closed: Option<f64>, solved: f64) -> Result<Self, OracleError> {
        if let Some(c) = closed {
            if (c - solved).abs() > AGREEMENT_TOL * c.abs().max(1.0) {
                return Err(OracleError::Mismatch { what, closed: c, solved });
            }
        }
        Ok(CrossCheck { closed_form: closed, linear_solve: solved })
    }

    pub fn value(&self) -> f64 {
        self.closed_form.unwrap_or(self.linear_solve)
    }
}

/// `P-bar_1(T_k < inf) = (1/k)(1 - k/M)/(1 - 1/M)`, conditioned on `T_0 < T_M`.
pub fn p_bar_reach(k: usize, m: usize) -> f64 {
    let (k, m) = (k as f64, m as f64);
    (1.0 / k) * (1.0 - k / m) / (1.0 - 1.0 / m)
}

/// `P-bar_k(T_k^+ > T_0) = (1/2)(1/k)/(1 - k/M)`.
pub fn p_bar_escape(k: usize, m: usize) -> f64 {
    let (k, m) = (k as f64, m as f64);
    0.5 * (1.0 / k) / (1.0 - k / m)
}

/// `P-hat_k(T_k^+ > T_M) = (1/2)(1/(M-k))/(k/M)`, conditioned on `T_M < T_0`.
pub fn p_hat_escape(k: usize, m: usize) -> f64 {
    let (k, m) = (k as f64, m as f64);
    0.5 * (1.0 / (m - k)) / (k / m)
}

/// Green's functions of the chain conditioned to die (`bar`) or to reach `M` (`hat`).
struct Conditioned {
    bar: DMatrix<f64>,
    hat: DMatrix<f64>,
}

fn green(q: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    let n = q.nrows();
    (DMatrix::identity(n, n) - q).lu().try_inverse().ok_or(OracleError::Singular)
}

fn doob(q: &DMatrix<f64>, h: &DVector<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    DMatrix::from_fn(n, n, |i, j| q[(i, j)] * h[j] / h[i])
}

fn conditioned_greens(chain: &SizeChain) -> Result<Conditioned, OracleError> {
    let q = chain.transient_matrix();
    let n = q.nrows();
    let p_down = 1.0 / (1.0 + chain.lambda);
    // h(k) = P_k(T_0 < T_M) solves (I - Q) h = (exit to 0).
    let mut rhs = DVector::zeros(n);
    rhs[0] = p_down;
    let h_die = (DMatrix::identity(n, n) - &q)
        .lu()
        .solve(&rhs)
        .ok_or(OracleError::Singular)?;
    let h_reach = h_die.map(|v| 1.0 - v);
    Ok(Conditioned {
        bar: green(&doob(&q, &h_die))?,
        hat: green(&doob(&q, &h_reach))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub k: usize,
    /// `P-bar_1(T_k < inf)`.
    pub p_bar_reach: CrossCheck,
    /// `P-bar_k(T_k^+ > T_0)`.
    pub p_bar_escape: CrossCheck,
    /// `P-hat_k(T_k^+ > T_M)`.
    pub p_hat_escape: CrossCheck,
    /// Expected visits to `k` from 1 given `T_0 < T_M`.
    pub visits_bar: f64,
    /// Expected visits to `k` from 1 given `T_M < T_0`.
    pub visits_hat: f64,
}

/// Hitting and visit statistics for every transient level `1..M`.
pub fn hitting_and_visits(chain: &SizeChain) -> Result<Vec<LevelRow>, OracleError> {
    let g = conditioned_greens(chain)?;
    let m = chain.max_level;
    let neutral = chain.is_neutral();
    (1..m)
        .map(|k| {
            let i = k - 1;
            let closed = |f: fn(usize, usize) -> f64| neutral.then(|| f(k, m));
            Ok(LevelRow {
                k,
                p_bar_reach: CrossCheck::checked(
                    "P-bar_1(T_k<inf)",
                    closed(p_bar_reach),
                    g.bar[(0, i)] / g.bar[(i, i)],
                )?,
                p_bar_escape: CrossCheck::checked("P-bar_k(T_k+>T_0)", closed(p_bar_escape), 1.0 / g.bar[(i, i)])?,
                p_hat_escape: CrossCheck::checked("P-hat_k(T_k+>T_M)", closed(p_hat_escape), 1.0 / g.hat[(i, i)])?,
                visits_bar: g.bar[(0, i)],
                visits_hat: g.hat[(0, i)],
            })
        })
        .collect()
}

/// `E_1(int_0^T0 |xi| ds | T_0 < T_M)`.
pub fn conditioned_manhours_die(chain: &SizeChain) -> Result<CrossCheck, OracleError> {
    let g = conditioned_greens(chain)?;
    let m = chain.max_level;
    let solved: f64 = (1..m).map(|k| g.bar[(0, k - 1)] * k as f64 / chain.jump_rate(k)).sum();
    let closed = chain.is_neutral().then(|| {
        (1..m)
            .map(|k| p_bar_reach(k, m) / p_bar_escape(k, m) * k as f64 / chain.jump_rate(k))
            .sum()
    });
    CrossCheck::checked("man-hours given extinction", closed, solved)
}

/// `E_1(int_0^T_M |xi| ds | T_M < T_0)`.
pub fn conditioned_manhours_reach(chain: &SizeChain) -> Result<CrossCheck, OracleError> {
    let g = conditioned_greens(chain)?;
    let m = chain.max_level;
    let solved: f64 = (1..m).map(|k| g.hat[(0, k - 1)] * k as f64 / chain.jump_rate(k)).sum();
    let closed = chain
        .is_neutral()
        .then(|| (1..m).map(|k| k as f64 / (chain.jump_rate(k) * p_hat_escape(k, m))).sum());
    CrossCheck::checked("man-hours given reaching M", closed, solved)
}

/// Whether the die-out display keeps the `1/(1 - 1/M)` conditioning factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DieNormalization {
    /// `2/(1 - 1/M) sum (1-k/M)^2 k/q(k)`; equals the conditioned expectation.
    Conditioned,
    /// `2 sum (1-k/M)^2 k/q(k)`, the form used for `d >= 2` bounds.
    Plain,
}

/// Man-hours display for families that die before `M`.
pub fn die_display(chain: &SizeChain, norm: DieNormalization) -> f64 {
    let m = chain.max_level as f64;
    let s: f64 = (1..=chain.max_level)
        .map(|k| {
            let kf = k as f64;
            (1.0 - kf / m).powi(2) * kf / chain.jump_rate(k)
        })
        .sum();
    match norm {
        DieNormalization::Conditioned => 2.0 * s / (1.0 - 1.0 / m),
        DieNormalization::Plain => 2.0 * s,
    }
}

/// Man-hours display for families that will reach `M` but have not yet:
/// `(2/M) sum (M-k) k^2 / q(k)`.
pub fn not_yet_display(chain: &SizeChain) -> f64 {
    let m = chain.max_level as f64;
    let s: f64 = (1..=chain.max_level)
        .map(|k| {
            let kf = k as f64;
            (m - kf) * kf * kf / chain.jump_rate(k)
        })
        .sum();
    2.0 * s / m
}

/// The bare sums bounded by integrals in the small-family estimates.
/// `die`: `sum (1-k/M)^2 k` (d=1), `sum (1-k/M)^2 ln k` (d=2), `sum (1-k/M)^2` (d=3).
/// `not_yet`: `sum (M-k) k^2`, `sum (M-k) k ln k`, `sum (M-k) k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumBound {
    pub sum: f64,
    pub bound: f64,
}

pub fn die_sum_bound(d: usize, m: usize) -> SumBound {
    let mf = m as f64;
    let sum = (1..=m)
        .map(|k| {
            let kf = k as f64;
            let w = (1.0 - kf / mf).powi(2);
            match d {
                1 => w * kf,
                2 => w * kf.ln(),
                _ => w,
            }
        })
        .sum();
    let bound = match d {
        1 => mf * mf / 12.0,
        2 => mf * mf.ln(),
        _ => mf / 3.0,
    };
    SumBound { sum, bound }
}

pub fn not_yet_sum_bound(d: usize, m: usize) -> SumBound {
    let mf = m as f64;
    let sum = (1..=m)
        .map(|k| {
            let kf = k as f64;
            let w = (mf - kf) * kf;
            match d {
                1 => w * kf,
                2 => w * kf.ln(),
                _ => w,
            }
        })
        .sum();
    let bound = match d {
        1 => mf.powi(4) / 12.0,
        2 => mf.powi(3) / 6.0 * mf.ln(),
        _ => mf.powi(3) / 6.0,
    };
    SumBound { sum, bound }
}

/// Rates (per unit `N u1`) at which small families produce type 2's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallFamilyBounds {
    /// Families that die before reaching `n eps`.
    pub die: f64,
    /// Families that will reach `n eps` but have not yet.
    pub not_yet: f64,
    pub total: f64,
}

/// `u2^(1/3) eps^2/4` (d=1), `h_2(u2) 7 eps/(24 beta)` (d=2), `u2^(1/2) eps/(2 d beta)` (d=3),
/// split into its die-out and not-yet pieces.
pub fn small_family_bounds(d: usize, u2: f64, eps: f64, beta: f64) -> Result<SmallFamilyBounds, OracleError> {
    if !(eps > 0.0) {
        return Err(OracleError::Domain { what: "eps", value: eps });
    }
    if d > 1 && !(beta > 0.0) {
        return Err(OracleError::Domain { what: "beta", value: beta });
    }
    let h = analytic::h_d(d, u2)?;
    let (die, not_yet) = match d {
        1 => (h * eps * eps / 12.0, h * eps * eps / 6.0),
        2 => (h * eps / (4.0 * beta), h * eps / (24.0 * beta)),
        _ => {
            let db = d as f64 * beta;
            (h * eps / (3.0 * db), h * eps / (6.0 * db))
        }
    };
    Ok(SmallFamilyBounds { die, not_yet, total: die + not_yet })
}
