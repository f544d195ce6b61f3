use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nnflow_cli::commands::{cmd_admissible, cmd_report, cmd_solve, cmd_stability_study, cmd_verify};
use nnflow_cli::CliError;

/// Regularized steady compressible power-law and Herschel–Bulkley flow solver.
///
/// Exit codes: 0 success; 1 inadmissible parameters, failed verification or
/// incomplete run; 2 invalid configuration or unknown suite; 3 solver failure
/// (a partial manifest is written).
#[derive(Parser)]
#[command(name = "nnflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check whether (d, r, gamma) lies in the admissible range.
    Admissible {
        #[arg(short = 'd', long)]
        d: usize,
        #[arg(short = 'r', long)]
        r: f64,
        #[arg(long)]
        gamma: f64,
    },
    /// Run the continuation ladder described by a JSON config.
    Solve { config: PathBuf },
    /// Run a verification suite by name, or `all`.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the suite reports as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Solve with oscillatory forcings f + A sin(2πk x1) e_i and tabulate the
    /// distance to the unperturbed solution.
    StabilityStudy { config: PathBuf },
    /// Summarize a finished run directory.
    Report {
        dir: PathBuf,
        /// Write the diagnostics as one row per rung.
        #[arg(long)]
        wide: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NNFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("NNFLOW_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Admissible { d, r, gamma } => cmd_admissible(*d, *r, *gamma),
        Command::Solve { config } => cmd_solve(config),
        Command::Verify { suite, seed, json } => cmd_verify(suite, *seed, json.as_deref()),
        Command::StabilityStudy { config } => cmd_stability_study(config),
        Command::Report { dir, wide } => cmd_report(dir, wide.as_deref()),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
