//! `otf`: pretrain a starting model, drive an uncertainty-gated MD run,
//! evaluate a checkpointed ensemble, self-test the calibration math, and
//! analyze finished runs.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 1 anything else (I/O). Worker-thread count follows RAYON_NUM_THREADS.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use otf_core::Error;

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "otf", version, about = "Uncertainty-gated on-the-fly learning for MD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit starting parameters on a reference-oracle dataset (generating
    /// the dataset first when configured to).
    Pretrain(CommonArgs),
    /// Drive the uncertainty-gated MD run described by the config.
    RunOtf(RunArgs),
    /// Score a checkpointed ensemble against a labeled dataset.
    Evaluate(CommonArgs),
    /// Cross-check the gate probability against quadrature and Monte
    /// Carlo on a built-in parameter grid.
    CalibSelftest(SelftestArgs),
    /// Event-rate statistics and calibration curves for a finished run.
    Analyze(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SelftestArgs {
    /// Where to write the report next to stdout; omitted keeps it
    /// stdout-only.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo draws per grid cell.
    #[arg(long, default_value_t = 100_000)]
    draws: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_config() {
                2
            } else if matches!(e, Error::Io(_)) {
                1
            } else {
                3
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> otf_core::Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let config = RunConfig::load(&args.config, args.seed)?;
            commands::pretrain::run(&config, &args.out)
        }
        Command::RunOtf(args) => {
            let config = RunConfig::load(&args.common.config, args.common.seed)?;
            commands::run::run(&config, &args.common.out, args.resume)
        }
        Command::Evaluate(args) => {
            let config = RunConfig::load(&args.config, args.seed)?;
            commands::evaluate::run(&config, &args.out)
        }
        Command::CalibSelftest(args) => {
            commands::selftest::run(args.draws, args.seed, args.out.as_deref())
        }
        Command::Analyze(args) => {
            let config = RunConfig::load(&args.config, args.seed)?;
            commands::analyze::run(&config, &args.out)
        }
    }
}
