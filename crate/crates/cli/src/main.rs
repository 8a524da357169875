use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use dyngam_cli::check::{render_table, run_checks};
use dyngam_cli::commands::{fit_command, parse_dims, simulate_command, FitArgs, SimulateArgs};
use dyngam_core::Dims;

/// Variational fitting of dynamic additive models for Poisson panel counts.
#[derive(Parser)]
#[command(name = "dyngam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a panel CSV and write the exports to a directory.
    Fit {
        data: PathBuf,
        /// `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Remove a cause code (and renumber the rest) before fitting.
        #[arg(long)]
        drop_cause: Option<usize>,
        /// Random initialization from this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw a synthetic panel from the model.
    Simulate {
        /// Regions, causes, age groups, genders, months.
        #[arg(long, value_parser = parse_dims)]
        dims: Dims,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generating parameters as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Common autoregressive coefficient (drawn per series otherwise).
        #[arg(long, allow_hyphen_values = true)]
        phi: Option<f64>,
    },
    /// Cross-check the engine against its reference implementations.
    Check,
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Fit { data, config, out, drop_cause, seed } => {
            let args = FitArgs { data, config, out, drop_cause, seed };
            let outcome = fit_command(&args).context("fit failed")?;
            let r = &outcome.report;
            println!(
                "sweeps: {}  final ELBO: {}  converged: {}",
                r.iterations,
                r.elbo_trace.last().copied().unwrap_or(f64::NAN),
                r.converged
            );
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", args.out.display());
            Ok(true)
        }
        Command::Simulate { dims, seed, out, truth, phi } => {
            simulate_command(&SimulateArgs { dims, seed, out: out.clone(), truth, phi }).context("simulation failed")?;
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Check => {
            let rows = run_checks();
            print!("{}", render_table(&rows));
            Ok(rows.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
