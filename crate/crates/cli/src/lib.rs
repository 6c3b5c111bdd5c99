//! Command-line driver: dataset generation, training, evaluation,
//! cross-domain experiments and built-in self-verification.

pub mod commands;
pub mod manifest;
pub mod selftest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rcdn_core::data::Domain;
use rcdn_core::Error;

use selftest::{Fault, Suite};

#[derive(Debug, Parser)]
#[command(
    name = "rcdn",
    version,
    about = "Real-centered forgery detection on synthetic domains"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the four-domain synthetic dataset.
    GenData(GenDataArgs),
    /// Train one detector on real vs one forged domain.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a fresh model) on one test domain.
    Eval(EvalArgs),
    /// Train on each forged domain and test on all three.
    Crossdomain(CrossdomainArgs),
    /// Run the built-in verification suites.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 500)]
    pub per_domain_train: usize,
    #[arg(long, default_value_t = 200)]
    pub per_domain_test: usize,
}

/// Training knobs shared by `train` and `crossdomain`. Values given here
/// override the `--config` file, which overrides the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// JSON training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Evaluate on the held-out split every N epochs (0 disables).
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub train_domain: Domain,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_domain: Domain,
    #[arg(long)]
    pub out: PathBuf,
    /// Trained weights; without it a freshly initialized model is scored.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Initialization seed of the fresh model.
    #[arg(long, default_value_t = 1, conflicts_with = "checkpoint")]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CrossdomainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also run the baseline without center and separation terms.
    #[arg(long)]
    pub ablation: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Run one suite only.
    #[arg(long)]
    pub suite: Option<Suite>,
    #[arg(long, value_enum, default_value_t = Fault::None, hide = true)]
    pub inject_fault: Fault,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("selftest failed: {}", .0.join(", "))]
    Selftest(Vec<String>),
}

pub mod exit {
    pub const OK: i32 = 0;
    pub const SELFTEST: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Selftest(_) => exit::SELFTEST,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::Parse { .. } | Error::Json(_) => exit::IO,
                Error::NonFinite { .. }
                | Error::Determinism { .. }
                | Error::DegenerateBatch { .. }
                | Error::UndefinedRatio => exit::NUMERICAL,
                Error::Usage(_) | Error::Config(_) | Error::Validation(_) | Error::Dimension { .. } => exit::USAGE,
            },
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Crossdomain(a) => commands::crossdomain(&a),
        Command::Selftest(a) => commands::selftest(a.suite.map_or(Suite::ALL.to_vec(), |s| vec![s]), a.inject_fault),
    }
}
