//! `openloop`: runs purification and measurement experiments, the oracle
//! suite, and offline filtering of stored measurement records.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 failed oracle or replay check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use openloop_cli::commands::{self, FilterOptions};
use openloop_cli::config::{Experiment, InitialState, ObservableSpec, Overrides, RunConfig};
use openloop_cli::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(
    name = "openloop",
    version,
    about = "Open-loop control of continuously measured quantum systems"
)]
struct Cli {
    /// Worker threads for trajectory ensembles (default: all cores).
    #[arg(long, global = true, env = "OPENLOOP_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Impurity speed-ups of the configured strategies over no control.
    Purify(RunArgs),
    /// Log-infidelity speed-ups in the measurement basis.
    Measure(RunArgs),
    /// Generic sweep; the metric comes from the manifest.
    Sweep(RunArgs),
    /// Check the closed-form averages against Monte Carlo and enumeration.
    Oracle(RunArgs),
    /// Re-derive the final state of a stored measurement record.
    Filter(FilterArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML manifest; flags override its values.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// Record file written by `--records`.
    record: PathBuf,

    /// Report path (default: the record path with a .json extension).
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,

    /// Initial state, if the record does not name one.
    #[arg(long)]
    initial_state: Option<InitialState>,

    /// Observable, if the record does not name one.
    #[arg(long)]
    observable: Option<ObservableSpec>,
}

fn resolve(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&args.overrides);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Purify(a) => commands::run_experiment(&resolve(&a)?, Experiment::Purify).map(drop),
        Command::Measure(a) => commands::run_experiment(&resolve(&a)?, Experiment::Measure).map(drop),
        Command::Sweep(a) => commands::run_experiment(&resolve(&a)?, Experiment::Sweep).map(drop),
        Command::Oracle(a) => commands::run_oracle(&resolve(&a)?).map(drop),
        Command::Filter(a) => commands::run_filter(
            &a.record,
            &FilterOptions {
                output: a.output,
                initial_state: a.initial_state,
                observable: a.observable,
            },
        )
        .map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
