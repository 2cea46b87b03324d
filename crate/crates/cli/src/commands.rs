use serde::Serialize;
use serde_json::json;

use tunneling_core::analytic::{self, Predictions};
use tunneling_core::diffusion::{self, DiffusionParams};
use tunneling_core::engine::{self, Dynamics, FamilyCaps, SimParams};
use tunneling_core::oracle::{self, DieNormalization, SizeChain};
use tunneling_core::stats;

use crate::config::{BoundaryArgs, DiffusionArgs, DynamicsArg, NuArgs, OracleArgs, PredictArgs, Tau2Args};
use crate::output::Output;
use crate::CliError;

/// Resolved configs have every field set.
fn get<T: Copy>(v: Option<T>, name: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Internal(format!("unresolved config key {name}")))
}

pub fn install_threads(threads: Option<usize>) -> Result<(), CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t);
    }
    b.build_global().map_err(|e| CliError::Internal(e.to_string()))
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

pub fn estimate_nu(a: &NuArgs, out: &mut Output) -> Result<(), CliError> {
    let dim = get(a.dim, "dim")?;
    let u2 = get(a.u2, "u2")?;
    let reps = get(a.reps, "reps")?;
    let beta = get(a.beta, "beta")?;
    let dynamics = match get(a.dynamics, "dynamics")? {
        DynamicsArg::BiasedVoter => Dynamics::BiasedVoter,
        DynamicsArg::Komarova => Dynamics::Komarova,
    };
    let p = SimParams::family(dim, get(a.lambda, "lambda")?, u2)?
        .with_seed(get(a.seed, "seed")?)
        .with_dynamics(dynamics);
    let caps = FamilyCaps::smoothed(&p);
    let est = engine::estimate_nu(&p, &caps, reps)?;

    if get(a.families, "families")? && u2 > 0.0 {
        // Same seed, so these are the families behind the estimate.
        for (i, (w, fate)) in engine::family_man_hours(&p, u2, &caps, reps)?.into_iter().enumerate() {
            out.record("family", &json!({ "replica": i, "man_hours": w, "fate": fate }))?;
        }
    }

    let pred = if u2 > 0.0 { Some(Predictions::compute(dim, 1.0, 0.0, u2, beta)?.nu_pred) } else { None };
    out.csv_row(["nu_hat", "stderr", "u2", "reps", "size_capped", "man_hour_capped"])?;
    out.csv_row([fmt(est.nu_hat), fmt(est.stderr), fmt(u2), reps.to_string(), est.size_capped.to_string(), est.man_hour_capped.to_string()])?;
    out.summary(&json!({
        "nu_hat": est.nu_hat,
        "stderr": est.stderr,
        "reps": est.reps,
        "size_capped": est.size_capped,
        "man_hour_capped": est.man_hour_capped,
        "nu_pred": pred,
        "ratio": pred.map(|q| est.nu_hat / q),
    }))?;
    if est.size_capped > 0 {
        return Err(CliError::Exhausted(format!("{} families hit the size cap", est.size_capped)));
    }
    Ok(())
}

pub fn tau2(a: &Tau2Args, out: &mut Output) -> Result<(), CliError> {
    let dim = get(a.dim, "dim")?;
    let side = get(a.side, "side")?;
    let (u1, u2) = (get(a.u1, "u1")?, get(a.u2, "u2")?);
    let p = SimParams::torus(dim, side, get(a.lambda, "lambda")?, u1, u2)?.with_seed(get(a.seed, "seed")?);
    let n_sites = (side as f64).powi(dim as i32);
    let rate = analytic::tau2_rate(n_sites, u1, u2, dim, get(a.beta, "beta")?)?;
    let samples = engine::tau2_batch(&p, get(a.reps, "reps")?)?;

    out.csv_row(["replica", "tau2", "rho2", "n_families"])?;
    for (i, s) in samples.iter().enumerate() {
        out.record("sample", &json!({ "replica": i, "tau2": s.tau2, "rho2": s.rho2, "n_families": s.n_families }))?;
        out.csv_row([i.to_string(), fmt(s.tau2), fmt(s.rho2), s.n_families.to_string()])?;
    }
    let taus: Vec<f64> = samples.iter().map(|s| s.tau2).collect();
    let (mean, stderr) = match stats::mean_stderr(&taus) {
        Ok(v) => (v.0, Some(v.1)),
        Err(_) => (taus[0], None),
    };
    out.summary(&json!({
        "mean_tau2": mean,
        "stderr": stderr,
        "predicted_rate": rate.rate,
        "predicted_mean": 1.0 / rate.rate,
        "mean_ratio": mean * rate.rate,
        "regime": rate.regime,
        "ks": stats::ks_exponential(&taus, rate.rate)?,
    }))
}

pub fn boundary(a: &BoundaryArgs, out: &mut Output) -> Result<(), CliError> {
    let dim = get(a.dim, "dim")?;
    let levels = a.levels.clone().ok_or_else(|| CliError::Internal("unresolved levels".into()))?;
    let p = SimParams::family(dim, 1.0, 0.0)?.with_seed(get(a.seed, "seed")?);
    let rows = engine::boundary_profile(&p, &levels, get(a.reps, "reps")?)?;

    out.csv_row(["k", "boundary_mean", "boundary_stderr", "implied_beta"])?;
    for r in &rows {
        let k = r.k as f64;
        // |boundary| ~ 4 beta_2 k / ln k in d = 2 and 2 d beta_d k above.
        let scale = match dim {
            1 => None,
            2 if r.k > 1 => Some(k.ln() / (4.0 * k)),
            2 => None,
            _ => Some(1.0 / (2.0 * dim as f64 * k)),
        };
        let implied = scale.map(|s| r.mean * s);
        out.record(
            "level",
            &json!({
                "k": r.k,
                "boundary_mean": r.mean,
                "boundary_stderr": r.stderr,
                "reps": r.reps,
                "implied_beta": implied,
                "implied_beta_stderr": scale.map(|s| r.stderr * s),
            }),
        )?;
        out.csv_row([r.k.to_string(), fmt(r.mean), fmt(r.stderr), implied.map(fmt).unwrap_or_default()])?;
    }
    out.summary(&json!({ "levels": rows.len() }))
}

pub fn predict(a: &PredictArgs, out: &mut Output) -> Result<(), CliError> {
    let dim = get(a.dim, "dim")?;
    let n_sites = (get(a.side, "side")? as f64).powi(dim as i32);
    let pred = Predictions::compute(dim, n_sites, get(a.u1, "u1")?, get(a.u2, "u2")?, get(a.beta, "beta")?)?;
    out.record("predictions", &pred)?;
    out.summary(&json!({}))
}

#[derive(Serialize)]
struct DiffusionRecord {
    eps: f64,
    kill_rate_scale: f64,
    #[serde(rename = "F_eps")]
    f_eps: f64,
    stderr: f64,
    f_over_eps: f64,
    gamma_target: f64,
    reps: usize,
    horizon_hits: usize,
}

pub fn diffusion(a: &DiffusionArgs, out: &mut Output) -> Result<(), CliError> {
    let dim = get(a.dim, "dim")?;
    let eps = get(a.eps, "eps")?;
    let beta = get(a.beta, "beta")?;
    let reps = get(a.reps, "reps")?;
    let seed = get(a.seed, "seed")?;
    // With u2 the killing rate is n a_n u2 and F/(n eps) is the truncated
    // tunneling probability; without it the rate is 1 and F/eps -> gamma_d.
    let scale = match a.u2 {
        Some(u2) => {
            let n = 1.0 / analytic::h_d(dim, u2)?;
            Some((u2, n, n * analytic::a_n(dim, n)? * u2))
        }
        None => None,
    };
    let kill = scale.map_or(1.0, |s| s.2);
    let p = DiffusionParams::new(dim, eps, beta)
        .with_dt(get(a.dt, "dt")?)
        .with_kill(kill)
        .with_horizon(get(a.horizon, "horizon")?);
    let f = diffusion::f_eps(&p, reps, seed)?;
    let gamma = analytic::gamma_d(dim, beta)?;
    let closed = 1.0 - analytic::laplace_functional(dim, eps, kill, beta)?;
    let rec = DiffusionRecord {
        eps,
        kill_rate_scale: kill,
        f_eps: f.f,
        stderr: f.stderr,
        f_over_eps: f.f_over_eps(),
        gamma_target: gamma,
        reps: f.reps,
        horizon_hits: f.horizon_hits,
    };
    out.record("f_eps", &rec)?;
    out.csv_row(["eps", "F_eps", "stderr", "gamma_target"])?;
    out.csv_row([fmt(eps), fmt(f.f), fmt(f.stderr), fmt(gamma)])?;
    let nu = scale.map(|(u2, n, c)| {
        let h = 1.0 / n;
        json!({
            "u2": u2,
            "n": n,
            "c": c,
            "nu_eps": f.f / (n * eps),
            "nu_eps_stderr": f.stderr / (n * eps),
            "nu_eps_closed_form": closed / (n * eps),
            "gamma_h": gamma * h,
        })
    });
    out.summary(&json!({
        "F_eps": f.f,
        "F_closed_form": closed,
        "F_over_eps": f.f_over_eps(),
        "gamma_target": gamma,
        "nu_eps_prediction": nu,
    }))?;
    if f.horizon_hits > 0 {
        return Err(CliError::Exhausted(format!("{} paths survived to the horizon", f.horizon_hits)));
    }
    Ok(())
}

pub fn oracle(a: &OracleArgs, out: &mut Output) -> Result<(), CliError> {
    let dim = get(a.dim, "dim")?;
    let m = get(a.max_level, "max_level")?;
    let beta = get(a.beta, "beta")?;
    let chain = SizeChain::neutral(dim, m, beta)?;
    for row in oracle::hitting_and_visits(&chain)? {
        out.record("level", &row)?;
    }
    let die = oracle::conditioned_manhours_die(&chain)?;
    let reach = oracle::conditioned_manhours_reach(&chain)?;
    out.record(
        "man_hours",
        &json!({
            "die": die,
            "die_display_conditioned": oracle::die_display(&chain, DieNormalization::Conditioned),
            "die_display_plain": oracle::die_display(&chain, DieNormalization::Plain),
            "reach": reach,
            "not_yet_display": oracle::not_yet_display(&chain),
        }),
    )?;
    out.record(
        "sum_bounds",
        &json!({ "die": oracle::die_sum_bound(dim, m), "not_yet": oracle::not_yet_sum_bound(dim, m) }),
    )?;
    let bounds = oracle::small_family_bounds(dim, get(a.u2, "u2")?, get(a.eps, "eps")?, beta)?;
    out.record("small_family_bounds", &bounds)?;
    out.summary(&json!({ "levels": m }))
}
