//! `diffvar` — batch front door for the diffusion variational toolkit.
//!
//! Five subcommands, one output discipline: every run prints a CSV table whose
//! rows carry the command, a hash of the resolved configuration, the seed,
//! grid and path counts. Reruns with identical configuration are
//! byte-identical regardless of `DIFFVAR_THREADS`.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 numerical
//! failure (including FAIL rows in verification batteries).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffvar_core::error::Error;

mod commands;
mod config;
mod csv;
mod expr;
mod presets;

#[derive(Parser)]
#[command(
    name = "diffvar",
    about = "Simulation, exact oracles and variational estimators for controlled diffusions",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file of `key = value` lines; `#` starts a comment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline `key=value` overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Direct free-energy estimate of the configured functional.
    Estimate(CommonArgs),
    /// Minimize the control objective over a parametric family.
    Optimize(CommonArgs),
    /// Exact identities on the enumerable path space.
    Oracle(CommonArgs),
    /// The standard identity battery on the configured preset.
    Verify(CommonArgs),
    /// Retarded-shift density approximation over a parameter schedule.
    #[command(name = "approx-density")]
    ApproxDensity(CommonArgs),
}

fn thread_pool_from_env() -> Result<(), Error> {
    if let Ok(v) = std::env::var("DIFFVAR_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::invalid(format!("DIFFVAR_THREADS must be an integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::invalid("DIFFVAR_THREADS must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("cannot build thread pool: {e}")))?;
    }
    Ok(())
}

fn run() -> Result<bool, Error> {
    thread_pool_from_env()?;
    let cli = Cli::parse();
    let sink = match &cli.command {
        Command::Estimate(a) => {
            let cfg = config::RawConfig::load(a.config.as_deref(), &a.overrides)?;
            commands::estimate::run(&cfg)?
        }
        Command::Optimize(a) => {
            let cfg = config::RawConfig::load(a.config.as_deref(), &a.overrides)?;
            commands::optimize::run(&cfg)?
        }
        Command::Oracle(a) => {
            let cfg = config::RawConfig::load(a.config.as_deref(), &a.overrides)?;
            commands::oracle::run(&cfg)?
        }
        Command::Verify(a) => {
            let cfg = config::RawConfig::load(a.config.as_deref(), &a.overrides)?;
            commands::verify::run(&cfg)?
        }
        Command::ApproxDensity(a) => {
            let cfg = config::RawConfig::load(a.config.as_deref(), &a.overrides)?;
            commands::approx_density::run(&cfg)?
        }
    };
    Ok(sink.emit())
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("diffvar: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
