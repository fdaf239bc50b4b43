//! Command-line scenario runner: configuration ingestion, the four canonical
//! experiments, and deterministic artifact emission.
//!
//! Exit codes: 0 success, 2 usage (including an unknown scenario), 3 invalid
//! configuration, 4 output I/O failure, 1 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod scenarios;

use scenarios::CliError;

#[derive(Parser)]
#[command(
    name = "arpsim",
    about = "Adiabatic spin-refocusing simulator and analysis toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario from a config file and write its artifacts.
    Run {
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
        /// One of: nutation, refocusing, decay_series, spheres.
        /// Defaults to the `scenario` key of the config.
        #[arg(long)]
        scenario: Option<String>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Propagation engine: closed_form or ode.
        #[arg(long)]
        engine: Option<String>,
        /// Seed for Monte Carlo sampling and noise.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Worker threads for ensemble propagation (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Comma-separated snapshot times for the spheres scenario,
        /// e.g. "0,50us,0.1ms,150us,0.2ms".
        #[arg(long)]
        snapshot_times: Option<String>,
    },
    /// Parse a config and print per-pulse adiabaticity metrics.
    Inspect {
        /// TOML configuration file.
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            scenario,
            out,
            engine,
            seed,
            workers,
            snapshot_times,
        } => scenarios::run(
            &config,
            scenario.as_deref(),
            &out,
            engine.as_deref(),
            seed,
            workers,
            snapshot_times.as_deref(),
        ),
        Command::Inspect { config } => scenarios::inspect(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Output(_) => 4,
            CliError::Run(_) => 1,
        }
    }
}
