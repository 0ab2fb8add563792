//! `gkdr-emu`: dimension reduction, GP emulation, cross-validation and the elliptic
//! benchmark from the command line.
//!
//! Exit codes: 0 on success, 2 for usage or validation errors, 3 for numerical failures.
//! Errors are reported on stderr as a single line starting with `error:`.

mod commands;
mod config;
mod error;
mod io;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{BenchArgs, Context, CvArgs, FitArgs, MakeData, PredictArgs, ReduceArgs, VerifyArgs};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gkdr-emu", version, about = "Dimension-reduced Gaussian process emulation with gKDR")]
struct Cli {
    /// Seed for every random choice (designs, folds, optimizer starts).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a projection (gKDR, SIR, SIR-II, SAVE or active subspace).
    Reduce(ReduceArgs),
    /// Fit a GP emulator, on all inputs or on a projection.
    Fit(FitArgs),
    /// Predict with a fitted emulator.
    Predict(PredictArgs),
    /// Select d and the gKDR bandwidths by k-fold cross-validation.
    Cv(CvArgs),
    /// Run the elliptic PDE benchmark and write the report.
    #[command(name = "bench-study1")]
    BenchStudy1(BenchArgs),
    /// Generate a dataset from a built-in simulator.
    #[command(name = "make-data", subcommand)]
    MakeData(MakeData),
    /// Check a projection or model file.
    Verify(VerifyArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| CliError::usage(format!("--threads: {e}")))?;
    }
    let config = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(config.seed).unwrap_or(0);
    let ctx = Context { seed, config };
    match &cli.command {
        Command::Reduce(a) => commands::reduce(&ctx, a),
        Command::Fit(a) => commands::fit(&ctx, a),
        Command::Predict(a) => commands::predict(&ctx, a),
        Command::Cv(a) => commands::cv(&ctx, a),
        Command::BenchStudy1(a) => commands::bench_study1(&ctx, a),
        Command::MakeData(m) => commands::make_data(&ctx, m),
        Command::Verify(a) => commands::verify(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                    ExitCode::from(2)
                } else {
                    ExitCode::SUCCESS
                };
            }
            // keep the one-line reason; clap appends usage hints on later lines
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: {message}");
            ExitCode::from(code as u8)
        }
    }
}
