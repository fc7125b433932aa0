//! `sensorformer`: synthetic cohorts, training, transfer and evaluation runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};
use sensorformer::{ErrorCategory, Task};

#[derive(Parser, Debug)]
#[command(name = "sensorformer", version, about = "Wearable-sensor illness prediction experiments")]
pub struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Bitwise-reproducible outputs: no wall-clock fields, one worker thread
    /// unless --threads is given.
    #[arg(long, global = true)]
    pub strict_deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort with planted illness signal.
    Synth(SynthArgs),
    /// Write daily handcrafted features and per-split feature windows.
    Featurize(FeaturizeArgs),
    /// Train a model on the train period of one task.
    Train(TrainArgs),
    /// Train on fatigue labels over the train period.
    Pretrain(TrainArgs),
    /// Continue training on a small cohort of test-period users.
    Finetune(FinetuneArgs),
    /// Score test-period examples and write metrics and ROC curves.
    Evaluate(EvaluateArgs),
    /// Compare evaluated runs as a task by model grid.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset directory with sensors.{csv,jsonl} and labels.{csv,jsonl}.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
    /// First test-period day (default: study midpoint).
    #[arg(long)]
    pub boundary_day: Option<NaiveDate>,
    #[arg(long)]
    pub tuning_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub lookback_days: Option<usize>,
    /// Minutes averaged into one input step.
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub participants: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Make symptoms depend on markers several days apart.
    #[arg(long)]
    pub long_range: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Args, Debug, Clone)]
pub struct FeaturizeArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Full,
    CnnOnly,
    GbdtStandard,
    GbdtExpert,
    /// The full model plus every enabled baseline, each in a subdirectory.
    All,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fit an input normalization on the training windows.
    #[arg(long)]
    pub normalize: bool,
    /// Suppress the per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, value_enum, default_value_t = ModelKind::Full)]
    pub model_kind: ModelKind,
}

#[derive(Args, Debug, Clone)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Pretrained checkpoint; without it a fresh model is trained on the cohort.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Cohort size.
    #[arg(long)]
    pub k: Option<usize>,
    /// Cohort selection seed.
    #[arg(long = "cohort-seed", alias = "seed-cohort")]
    pub cohort_seed: Option<u64>,
    /// Model trained on the cohort when no checkpoint is given.
    #[arg(long, value_enum, default_value_t = ModelKind::Full)]
    pub model_kind: ModelKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Period {
    Test,
    Train,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// A `.ckpt` checkpoint or a tree model `.json`.
    #[arg(long)]
    pub model: PathBuf,
    /// Column name in reports (default: the model kind).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, value_enum, default_value_t = Period::Test)]
    pub period: Period,
    /// Score only the participants listed in this file, one id per line
    /// (e.g. a finetune run's holdout.txt).
    #[arg(long)]
    pub users: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    /// Comma-separated run directories or prediction files.
    #[arg(long, value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for an error: 1 I/O, 2 validation or configuration,
/// 3 numeric failure, 4 leakage-guard violation.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<sensorformer::Error>() {
            return match e.category() {
                ErrorCategory::Io => 1,
                ErrorCategory::Validation => 2,
                ErrorCategory::Numeric => 3,
                ErrorCategory::Leakage => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
