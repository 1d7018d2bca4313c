//! `sceq`: solve, verify and probe equilibrium singular control laws.
//!
//! Exit codes: 0 ok, 1 numerical failure (or a failed check), 2 config
//! error, 3 missing artifacts.

mod check;
mod manifest;
mod montecarlo;
mod oracle;
mod solve;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use manifest::{ConfigError, MissingArtifact};

/// Outcome of a command that ran to completion.
pub enum Status {
    Ok,
    /// Outputs were written but the run did not meet its criterion
    /// (non-convergence, failed hard invariant, failed check).
    Failed,
}

#[derive(Parser)]
#[command(name = "sceq", version, about = "Equilibrium singular control under non-exponential discounting")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "SCEQ_OUT_DIR", default_value = "sceq-out")]
    out: PathBuf,
    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the coupled system and write fields plus report.json.
    Solve(solve::SolveArgs),
    /// Recompute residuals and invariants over solved artifact directories.
    Verify(verify::VerifyArgs),
    /// Exponential-discount oracle gaps E₁, E₂.
    Oracle(oracle::OracleArgs),
    /// Monte-Carlo estimate of the objective (or a family member) under the law.
    Mc(montecarlo::McArgs),
    /// Paired perturbation test of the equilibrium condition.
    Perturb(montecarlo::PerturbArgs),
    /// Evaluate the standing assumptions on an instance.
    Check(check::CheckArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<MissingArtifact>().is_some() {
        return 3;
    }
    match err.downcast_ref::<sceq::Error>() {
        Some(sceq::Error::Config(_) | sceq::Error::Input(_) | sceq::Error::Range { .. } | sceq::Error::IllPosedTerminal(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let out = &cli.out;
    let result = match &cli.command {
        Command::Solve(a) => solve::run(a, out),
        Command::Verify(a) => verify::run(a, out),
        Command::Oracle(a) => oracle::run(a, out),
        Command::Mc(a) => montecarlo::run_mc(a, out),
        Command::Perturb(a) => montecarlo::run_perturb(a, out),
        Command::Check(a) => check::run(a, out),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
