//! `recdiff`: prepare data, train, evaluate, recommend, probe and sweep.
//!
//! Exit codes: 0 ok, 2 input or configuration error, 3 checkpoint or
//! vocabulary mismatch, 4 numeric failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use recdiff::Error;

use commands::Output;

#[derive(Parser, Debug)]
#[command(name = "recdiff", version, about = "Guided spherical diffusion recommender")]
struct Cli {
    /// Root for timestamped run directories.
    #[arg(long, env = "RECDIFF_OUTPUT", default_value = "runs", global = true)]
    output_root: PathBuf,
    /// More logging (repeat for debug); `RUST_LOG` also works.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a raw log into a prepared dataset directory.
    Prepare(commands::PrepareArgs),
    /// Write a clustered synthetic dataset with category labels.
    Synth(commands::SynthArgs),
    /// Train a model and write a checkpoint, logs and loss curves.
    Train(commands::TrainArgs),
    /// Recall and NDCG on held-out users.
    Eval(commands::EvalArgs),
    /// Batch top-N recommendations for given histories.
    Recommend(commands::RecommendArgs),
    /// Linear probe of item embeddings and category diversity.
    Probe(commands::ProbeArgs),
    /// Train and evaluate over a grid of one config key.
    Sweep(commands::SweepArgs),
}

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// Checkpoint and dataset disagree.
    Mismatch(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Mismatch(m) => write!(f, "{m}"),
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Mismatch(_) => 3,
            Failure::Core(e) => match e {
                Error::Checkpoint { .. } | Error::Shape { .. } => 3,
                Error::Diverged { .. } | Error::NonFinite(_) | Error::Degenerate { .. } => 4,
                _ => 2,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let output = Output { root: cli.output_root };
    let result = match &cli.command {
        Command::Prepare(a) => commands::prepare(a, &output),
        Command::Synth(a) => commands::synth(a, &output),
        Command::Train(a) => commands::train(a, &output),
        Command::Eval(a) => commands::eval(a, &output),
        Command::Recommend(a) => commands::recommend(a, &output),
        Command::Probe(a) => commands::probe(a, &output),
        Command::Sweep(a) => commands::sweep(a, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
