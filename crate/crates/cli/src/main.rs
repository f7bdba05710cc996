//! `evitraffic`: simulate corpora, train the forecaster, evaluate it, and
//! distill datasets by knowledge uncertainty.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure during training.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evitraffic::distill::DistillError;
use evitraffic::lwr::SimError;
use evitraffic::model::ModelError;
use evitraffic::roadgraph::GraphError;

use config::{DistillArgs, EvaluateArgs, FileConfig, SimulateArgs, StreamArgs, TrainArgs};

const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "evitraffic", version, about = "Evidential traffic forecasting and dataset distillation")]
struct Cli {
    /// TOML file with a `seed` key and one table per command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate scenarios and write a sample corpus.
    Simulate(SimulateArgs),
    /// Train (or resume training) a forecaster on a corpus.
    Train(TrainArgs),
    /// Error metrics and per-horizon calibration on a held-out corpus.
    Evaluate(EvaluateArgs),
    /// Rank samples by knowledge uncertainty and split the corpus.
    Distill(DistillArgs),
    /// Filter an incoming corpus against a distillation threshold.
    Stream(StreamArgs),
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => Failure::Numerical(e.to_string()),
            ModelError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<DistillError> for Failure {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::Model(m) => m.into(),
            DistillError::Invalid(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
    match cli.command {
        Command::Simulate(mut a) => {
            a.merge(std::mem::take(&mut file.simulate));
            commands::simulate(a, seed)
        }
        Command::Train(mut a) => {
            a.merge(std::mem::take(&mut file.train));
            commands::train(a, seed)
        }
        Command::Evaluate(mut a) => {
            a.merge(std::mem::take(&mut file.evaluate));
            commands::evaluate(a)
        }
        Command::Distill(mut a) => {
            a.merge(std::mem::take(&mut file.distill));
            commands::distill(a)
        }
        Command::Stream(mut a) => {
            a.merge(std::mem::take(&mut file.stream));
            commands::stream(a)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
