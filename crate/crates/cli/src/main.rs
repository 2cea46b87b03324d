mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{BoundaryArgs, DiffusionArgs, Globals, NuArgs, OracleArgs, PredictArgs, Tau2Args};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cap or horizon exhausted: {0}")]
    Exhausted(String),
    #[error("internal invariant failure: {0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Exhausted(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl From<tunneling_core::engine::EngineError> for CliError {
    fn from(e: tunneling_core::engine::EngineError) -> Self {
        use tunneling_core::engine::EngineError as E;
        match e {
            E::InvalidParams(_) => CliError::Config(e.to_string()),
            E::EventBudget { .. } => CliError::Exhausted(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<tunneling_core::diffusion::DiffusionError> for CliError {
    fn from(e: tunneling_core::diffusion::DiffusionError) -> Self {
        use tunneling_core::diffusion::DiffusionError as E;
        match e {
            E::Horizon { .. } => CliError::Exhausted(e.to_string()),
            E::Stats(_) => CliError::Internal(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<tunneling_core::analytic::AnalyticError> for CliError {
    fn from(e: tunneling_core::analytic::AnalyticError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<tunneling_core::oracle::OracleError> for CliError {
    fn from(e: tunneling_core::oracle::OracleError) -> Self {
        use tunneling_core::oracle::OracleError as E;
        match e {
            E::Mismatch { .. } | E::Singular => CliError::Internal(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<tunneling_core::stats::StatsError> for CliError {
    fn from(e: tunneling_core::stats::StatsError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("output: {e}"))
    }
}

/// Batch experiments for two-step mutation waiting times on the lattice.
#[derive(Debug, Parser)]
#[command(name = "tunnel", version)]
struct Cli {
    /// TOML file with the same keys as the flags; flags win
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved config as TOML and exit
    #[arg(long, global = true)]
    print_config: bool,
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Smoothed tunneling probability of one family
    EstimateNu(NuArgs),
    /// Waiting time for the first type-2 cell on the torus
    Tau2(Tau2Args),
    /// Boundary size of neutral families at the first time they reach size k
    Boundary(BoundaryArgs),
    /// Closed-form predictions
    Predict(PredictArgs),
    /// Killed Feller diffusion and the truncated tunneling probability
    Diffusion(DiffusionArgs),
    /// Exact size-chain sums and linear-solve cross-checks
    Oracle(OracleArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let Cli { config, print_config, globals, cmd } = cli;
    macro_rules! dispatch {
        ($args:expr, $ty:ty, $name:literal, $run:path) => {{
            let (file_globals, file_args) = match &config {
                Some(path) => config::load::<$ty>(path)?,
                None => Default::default(),
            };
            let globals = file_globals.overlay(globals).resolve()?;
            let args = file_args.overlay($args).resolve()?;
            if print_config {
                print!("{}", config::to_toml(&globals, &args)?);
                return Ok(());
            }
            commands::install_threads(globals.threads)?;
            let mut out = output::Output::open($name, &globals, &args)?;
            let result = $run(&args, &mut out);
            out.finish(result)
        }};
    }
    match cmd {
        Command::EstimateNu(a) => dispatch!(a, NuArgs, "estimate-nu", commands::estimate_nu),
        Command::Tau2(a) => dispatch!(a, Tau2Args, "tau2", commands::tau2),
        Command::Boundary(a) => dispatch!(a, BoundaryArgs, "boundary", commands::boundary),
        Command::Predict(a) => dispatch!(a, PredictArgs, "predict", commands::predict),
        Command::Diffusion(a) => dispatch!(a, DiffusionArgs, "diffusion", commands::diffusion),
        Command::Oracle(a) => dispatch!(a, OracleArgs, "oracle", commands::oracle),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tunnel: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
