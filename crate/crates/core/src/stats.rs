//! Small estimators and tests used by the experiments.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub target: String,
}

/// Terms kept in the Kolmogorov series.
const KOLMOGOROV_TERMS: usize = 100;

/// Asymptotic survival function of the Kolmogorov distribution,
/// `Q(t) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 t^2)`.
pub fn kolmogorov_q(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=KOLMOGOROV_TERMS {
        let k = k as f64;
        sum += sign * (-2.0 * k * k * t * t).exp();
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample Kolmogorov–Smirnov test against `1 - exp(-rate t)`.
pub fn ks_exponential(samples: &[f64], rate: f64) -> Result<TestReport, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::TooFewSamples { need: 1, got: 0 });
    }
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(StatsError::Domain { what: "rate", value: rate });
    }
    if let Some(&bad) = samples.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(StatsError::Domain { what: "sample (need > 0)", value: bad });
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let cdf = -(-rate * x).exp_m1();
        d = d.max((i + 1) as f64 / n - cdf).max(cdf - i as f64 / n);
    }
    let sn = n.sqrt();
    let p_value = kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
    Ok(TestReport {
        statistic: d,
        p_value,
        n: xs.len(),
        target: format!("exponential(rate = {rate:e})"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub stderr: f64,
}

/// Sample mean and its standard error (`sd / sqrt(n)`, unbiased variance).
pub fn mean_stderr(samples: &[f64]) -> Result<(f64, f64), StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples { need: 2, got: n });
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok((mean, (ss / (nf - 1.0) / nf).sqrt()))
}

/// Normal-approximation confidence interval for the mean.
pub fn mean_ci(samples: &[f64], level: f64) -> Result<MeanCi, StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::Domain { what: "confidence level", value: level });
    }
    let (mean, stderr) = mean_stderr(samples)?;
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0);
    Ok(MeanCi {
        mean,
        half_width: z * stderr,
        stderr,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(pairs: &[(f64, f64)]) -> Result<f64, StatsError> {
    if pairs.len() < 2 {
        return Err(StatsError::TooFewSamples { need: 2, got: pairs.len() });
    }
    for &(x, y) in pairs {
        if !(x > 0.0) {
            return Err(StatsError::Domain { what: "abscissa (need > 0)", value: x });
        }
        if !(y > 0.0) {
            return Err(StatsError::Domain { what: "ordinate (need > 0)", value: y });
        }
    }
    let n = pairs.len() as f64;
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(StatsError::Domain { what: "abscissa spread", value: 0.0 });
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}
