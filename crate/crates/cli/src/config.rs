//! Per-command settings. Every field is optional so that a config file and
//! the command line can be layered; `resolve` fills in defaults and the
//! resolved value is what gets echoed into the output.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::CliError;

/// Overlay `top` on `self`: any field set in `top` wins.
macro_rules! layered {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn overlay(self, top: Self) -> Self {
                $ty { $($field: top.$field.or(self.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsArg {
    BiasedVoter,
    Komarova,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Globals {
    /// Worker threads for replicas [env: TUNNEL_THREADS; default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON-lines output file [default: stdout]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also write the result table as CSV
    #[arg(long, global = true)]
    pub csv: Option<PathBuf>,
}
layered!(Globals { threads, out, csv });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct NuArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub u2: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub dynamics: Option<DynamicsArg>,
    /// beta_d for the prediction (d >= 2); estimated when omitted in d = 3
    #[arg(long)]
    pub beta: Option<f64>,
    /// Emit one record per family
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub families: Option<bool>,
}
layered!(NuArgs { dim, lambda, u2, reps, seed, dynamics, beta, families });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Tau2Args {
    #[arg(long)]
    pub dim: Option<usize>,
    /// Torus side length; the population is side^dim
    #[arg(long)]
    pub side: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub u1: Option<f64>,
    #[arg(long)]
    pub u2: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
}
layered!(Tau2Args { dim, side, lambda, u1, u2, reps, seed, beta });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BoundaryArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    /// Comma-separated sizes k
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<u64>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}
layered!(BoundaryArgs { dim, levels, reps, seed });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct PredictArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub side: Option<u64>,
    #[arg(long)]
    pub u1: Option<f64>,
    #[arg(long)]
    pub u2: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}
layered!(PredictArgs { dim, side, u1, u2, beta });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct DiffusionArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Step near 0 [default: eps * 1e-3]
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Sets the killing rate n a_n u2 and enables the nu^eps prediction [default: killing rate 1]
    #[arg(long)]
    pub u2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
}
layered!(DiffusionArgs { dim, eps, dt, reps, u2, seed, beta, horizon });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct OracleArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub max_level: Option<usize>,
    #[arg(long)]
    pub u2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}
layered!(OracleArgs { dim, max_level, u2, eps, beta });

/// `beta_d` when none is given: `pi` in d = 2, the in-repo estimate in d = 3.
pub fn default_beta(dim: usize) -> f64 {
    match dim {
        1 => 1.0,
        2 => std::f64::consts::PI,
        _ => 0.6595,
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_dim(dim: usize) -> Result<usize, CliError> {
    if (1..=3).contains(&dim) {
        Ok(dim)
    } else {
        Err(bad(format!("dim must be 1, 2 or 3 (got {dim})")))
    }
}

fn check_reps(reps: usize) -> Result<usize, CliError> {
    if reps >= 1 {
        Ok(reps)
    } else {
        Err(bad("reps must be at least 1"))
    }
}

fn check_beta(beta: f64) -> Result<f64, CliError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(beta)
    } else {
        Err(bad(format!("beta must be positive (got {beta})")))
    }
}

impl Globals {
    pub fn resolve(self) -> Result<Self, CliError> {
        let threads = match self.threads {
            Some(t) => t,
            None => match std::env::var("TUNNEL_THREADS") {
                Ok(v) => v.trim().parse().map_err(|_| bad(format!("TUNNEL_THREADS = {v:?} is not a count")))?,
                Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
            },
        };
        if threads == 0 {
            return Err(bad("threads must be at least 1"));
        }
        Ok(Globals { threads: Some(threads), ..self })
    }
}

impl NuArgs {
    pub fn resolve(self) -> Result<Self, CliError> {
        let dim = check_dim(self.dim.unwrap_or(1))?;
        Ok(NuArgs {
            dim: Some(dim),
            lambda: Some(self.lambda.unwrap_or(1.0)),
            u2: Some(self.u2.unwrap_or(1e-4)),
            reps: Some(check_reps(self.reps.unwrap_or(10_000))?),
            seed: Some(self.seed.unwrap_or(0)),
            dynamics: Some(self.dynamics.unwrap_or(DynamicsArg::BiasedVoter)),
            beta: Some(check_beta(self.beta.unwrap_or(default_beta(dim)))?),
            families: Some(self.families.unwrap_or(false)),
        })
    }
}

impl Tau2Args {
    pub fn resolve(self) -> Result<Self, CliError> {
        let dim = check_dim(self.dim.unwrap_or(1))?;
        let u1 = self.u1.unwrap_or(1e-5);
        let u2 = self.u2.unwrap_or(1e-3);
        if !(u1 > 0.0) {
            return Err(bad(format!("u1 = {u1}: no type-1 mutation can occur")));
        }
        if !(u2 > 0.0) {
            return Err(bad(format!("u2 = {u2}: no type-2 mutation can occur")));
        }
        Ok(Tau2Args {
            dim: Some(dim),
            side: Some(self.side.unwrap_or(100)),
            lambda: Some(self.lambda.unwrap_or(1.0)),
            u1: Some(u1),
            u2: Some(u2),
            reps: Some(check_reps(self.reps.unwrap_or(100))?),
            seed: Some(self.seed.unwrap_or(0)),
            beta: Some(check_beta(self.beta.unwrap_or(default_beta(dim)))?),
        })
    }
}

impl BoundaryArgs {
    pub fn resolve(self) -> Result<Self, CliError> {
        let levels = self.levels.unwrap_or_else(|| vec![10, 100, 1000]);
        if levels.is_empty() || levels.contains(&0) {
            return Err(bad("levels must be positive sizes"));
        }
        Ok(BoundaryArgs {
            dim: Some(check_dim(self.dim.unwrap_or(2))?),
            levels: Some(levels),
            reps: Some(check_reps(self.reps.unwrap_or(20))?),
            seed: Some(self.seed.unwrap_or(0)),
        })
    }
}

impl PredictArgs {
    pub fn resolve(self) -> Result<Self, CliError> {
        let dim = check_dim(self.dim.unwrap_or(1))?;
        Ok(PredictArgs {
            dim: Some(dim),
            side: Some(self.side.unwrap_or(1000)),
            u1: Some(self.u1.unwrap_or(1e-8)),
            u2: Some(self.u2.unwrap_or(1e-6)),
            beta: Some(check_beta(self.beta.unwrap_or(default_beta(dim)))?),
        })
    }
}

impl DiffusionArgs {
    pub fn resolve(self) -> Result<Self, CliError> {
        let dim = check_dim(self.dim.unwrap_or(1))?;
        let eps = self.eps.unwrap_or(0.01);
        if !(eps > 0.0) {
            return Err(bad(format!("eps must be positive (got {eps})")));
        }
        let dt = self.dt.unwrap_or(eps * tunneling_core::diffusion::DT_PER_EPS);
        if !(dt > 0.0) {
            return Err(bad(format!("dt must be positive (got {dt})")));
        }
        Ok(DiffusionArgs {
            dim: Some(dim),
            eps: Some(eps),
            dt: Some(dt),
            reps: Some(check_reps(self.reps.unwrap_or(10_000))?),
            u2: self.u2,
            seed: Some(self.seed.unwrap_or(0)),
            beta: Some(check_beta(self.beta.unwrap_or(default_beta(dim)))?),
            horizon: Some(self.horizon.unwrap_or(tunneling_core::diffusion::DEFAULT_HORIZON)),
        })
    }
}

impl OracleArgs {
    pub fn resolve(self) -> Result<Self, CliError> {
        let dim = check_dim(self.dim.unwrap_or(1))?;
        Ok(OracleArgs {
            dim: Some(dim),
            max_level: Some(self.max_level.unwrap_or(50)),
            u2: Some(self.u2.unwrap_or(1e-4)),
            eps: Some(self.eps.unwrap_or(0.1)),
            beta: Some(check_beta(self.beta.unwrap_or(default_beta(dim)))?),
        })
    }
}

/// A config file: global keys plus the keys of one command, in one table.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<(Globals, T), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<(Globals, T), String> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let mut globals = toml::Table::new();
    for key in ["threads", "out", "csv"] {
        if let Some(v) = table.remove(key) {
            globals.insert(key.into(), v);
        }
    }
    let g: Globals = globals.try_into().map_err(|e: toml::de::Error| e.to_string())?;
    let cmd: T = table.try_into().map_err(|e: toml::de::Error| e.to_string())?;
    Ok((g, cmd))
}

pub fn to_toml<T: Serialize>(globals: &Globals, cmd: &T) -> Result<String, CliError> {
    let internal = |e: toml::ser::Error| CliError::Internal(e.to_string());
    let mut table = toml::Table::try_from(cmd).map_err(internal)?;
    table.extend(toml::Table::try_from(globals).map_err(internal)?);
    toml::to_string(&table).map_err(internal)
}
