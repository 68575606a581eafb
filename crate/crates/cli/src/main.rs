//! `evroute`: generate synthetic fleets, train and compare energy
//! estimators, time inference and size models.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BenchArgs, EvalArgs, ExportArgs, GenerateArgs, ScaleArgs, TrainArgs};
use config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "evroute", version, about = "Route-level energy estimation for electric delivery fleets")]
struct Cli {
    /// JSON file whose keys mirror the subcommand's flag names. Flags given
    /// on the command line take precedence. A run manifest also works.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (routes.jsonl, schema.json, dataset.json).
    Generate(GenerateArgs),
    /// Fit one estimator on a dataset's train split.
    Train(TrainArgs),
    /// Score checkpoints on the test split and emit the comparison CSV.
    Eval(EvalArgs),
    /// Time inference for a set of models on one batch of routes.
    Bench(BenchArgs),
    /// Compute-optimal parameter count for a data size, and the matching preset.
    Scale(ScaleArgs),
    /// Per-route distance, returning state of charge and temperature as CSV.
    ExportFig(ExportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let config = cli.config.as_deref();
    let outcome = match cli.command {
        Command::Generate(a) => commands::generate(a, config),
        Command::Train(a) => commands::train(a, config),
        Command::Eval(a) => commands::eval(a, config),
        Command::Bench(a) => commands::bench(a, config),
        Command::Scale(a) => commands::scale(a, config),
        Command::ExportFig(a) => commands::export_fig(a, config),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("run `evroute --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
