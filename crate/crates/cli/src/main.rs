//! `vipnet`: train a small CNN, rank its conv layers by ViP sensitivity,
//! run the insertion plan, benchmark latency and check the error bound.

mod commands;
mod data;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::DataSource;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other failure
  2  usage error
  3  I/O error or missing file
  4  malformed model
  5  shape mismatch between model and data
  6  malformed data file
  7  invalid configuration
  8  training diverged";

#[derive(Parser, Debug)]
#[command(name = "vipnet", version, about = "Virtual pooling experiments", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the reference network and save it as a model directory.
    Train(TrainArgs),
    /// Accuracy with ViP on each conv layer alone, most tolerant first.
    Sensitivity(SensitivityArgs),
    /// Insert ViP group by group with finetuning; report the tradeoff.
    PlanRun(PlanRunArgs),
    /// Time forward passes of a model.
    Bench(BenchArgs),
    /// Compare the output-error bound with measured errors on random nets.
    BoundCheck(BoundCheckArgs),
    /// Predict labels for the test split.
    Infer(InferArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct Common {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 1 runs sequentially. Defaults to all cores, or 1
    /// for latency measurements.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// CIFAR-10 binary directory, or `synthetic:<seed>`.
    #[arg(long, default_value = "synthetic:0")]
    pub data: DataSource,
    /// Training images to use (all of CIFAR, 2000 synthetic by default).
    #[arg(long)]
    pub train_samples: Option<usize>,
    /// Test images to use (all of CIFAR, 1000 synthetic by default).
    #[arg(long)]
    pub test_samples: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Accuracy metric: a prediction counts if the label is in the top k.
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct PlanRunArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// Layers added per round, taken in sensitivity order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub groups: Vec<usize>,
    /// Finetune epochs per round.
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    /// Finetune learning rate.
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct TimingArgs {
    /// Timed runs.
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    /// Untimed runs before timing starts.
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Images per timed forward pass.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// Conv layers to switch to ViP before timing, e.g. `0,2`.
    #[arg(long, value_delimiter = ',')]
    pub vip: Option<Vec<usize>>,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NormArg {
    Rms,
    Sum,
}

#[derive(Args, Debug, Serialize)]
pub struct BoundCheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of random networks.
    #[arg(long, default_value_t = 100)]
    pub trials: u64,
    /// Seed of the first network; trial i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-filter norm in the bound.
    #[arg(long, value_enum, default_value_t = NormArg::Rms)]
    pub norm: NormArg,
    /// Measure L before the ReLU of the ViP layer.
    #[arg(long)]
    pub pre_activation: bool,
    /// Measure L over neighboring positions only.
    #[arg(long)]
    pub local_lipschitz: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
}

/// Map an error to the documented exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vipnet::Error>() {
            return match e {
                vipnet::Error::Io(_) => 3,
                vipnet::Error::Model(_) => 4,
                vipnet::Error::Shape(_) => 5,
                vipnet::Error::Data(_) => 6,
                vipnet::Error::Config(_) => 7,
                vipnet::Error::Diverged(_) => 8,
                vipnet::Error::Json(_) => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sensitivity(a) => commands::sensitivity(a),
        Command::PlanRun(a) => commands::plan_run(a),
        Command::Bench(a) => commands::bench(a),
        Command::BoundCheck(a) => commands::bound_check(a),
        Command::Infer(a) => commands::infer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
