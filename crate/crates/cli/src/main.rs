//! Pipeline driver: train models, compute attribution reports, aggregate
//! regions of interest, export maps.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, malformed files,
//! shape problems), 2 computation error (degenerate scores, divergence).

mod commands;
mod pgm;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "igc",
    version,
    about = "Train small differentiable models and compute Integrated Gradient Correlation maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and a JSON metrics report
    Train(TrainArgs),
    /// Compute dataset-wise attribution reports (JSON + CSV, optional PGM)
    Igc(IgcArgs),
    /// Sum a report's attributions over named regions of interest
    Roi(RoiArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Handwritten digits from IDX files
    Mnist,
    /// Synthetic y = w.x + bias + noise
    Linear,
    /// Synthetic images whose target is a statistic of a planted region
    PlantedRoi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticKind {
    Mean,
    Std,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// Two stride-2 convolutions + five dense layers, batch norm + Mish
    Conv,
    /// Five dense layers on flat inputs, batch norm + Mish
    Mlp,
    /// Conv architecture with ReLU activations
    ConvRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    /// Integrated Gradients (steps x baselines)
    Ig,
    /// Baseline Shapley (exact, or sampled with --permutations)
    Bs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Adam,
    SgdMomentum,
}

/// Dataset selection, shared by `train` and `igc`.
#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct DataArgs {
    #[arg(long, value_enum)]
    pub task: TaskKind,

    /// Directory with the four MNIST IDX files
    #[arg(long)]
    pub data_dir: Option<PathBuf>,

    /// MNIST file pair to read (train-* or t10k-*)
    #[arg(long, value_enum, default_value_t = SplitKind::Train)]
    pub split: SplitKind,

    /// Keep only the first N samples
    #[arg(long)]
    pub subset: Option<usize>,

    /// Synthetic tasks: sample count
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,

    /// linear: input dimension
    #[arg(long, default_value_t = 8)]
    pub dim: usize,

    /// linear: comma-separated true weights (default 1,0,0,...)
    #[arg(long)]
    pub weights: Option<String>,

    /// linear: intercept
    #[arg(long, default_value_t = 0.0)]
    pub bias: f64,

    /// linear: noise standard deviation
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: f64,

    /// planted-roi: image side length
    #[arg(long, default_value_t = 16)]
    pub side: usize,

    /// planted-roi: region as "row,col,height,width"
    #[arg(long, default_value = "6,6,4,4")]
    pub region_block: String,

    /// planted-roi: statistic computed over the region
    #[arg(long, value_enum, default_value_t = StatisticKind::Std)]
    pub statistic: StatisticKind,

    /// Seed for synthetic data generation
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Architecture (MNIST only; synthetic tasks pick their regressor)
    #[arg(long, value_enum, default_value_t = ArchKind::Conv)]
    pub arch: ArchKind,

    #[arg(long, default_value_t = 10)]
    pub epochs: usize,

    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,

    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,

    /// Seed for weight init, shuffling and the optimizer
    #[arg(long, default_value_t = 7)]
    pub seed: u64,

    /// Fraction of training data held out for the validation metric
    #[arg(long, default_value_t = 0.0)]
    pub validation_fraction: f64,

    /// Extra epochs at --finetune-lr after the main phase
    #[arg(long, default_value_t = 0)]
    pub finetune_epochs: usize,

    /// Learning rate of the fine-tune phase (default: learning-rate / 5)
    #[arg(long)]
    pub finetune_lr: Option<f64>,

    /// Initialize from an existing checkpoint instead of fresh weights
    #[arg(long)]
    pub init_from: Option<PathBuf>,

    /// Checkpoint output path
    #[arg(long)]
    pub out: PathBuf,

    /// Metrics JSON path (default: next to the checkpoint)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct IgcArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Integrated Gradients interpolation steps
    #[arg(long, default_value_t = 32)]
    pub steps: usize,

    /// Baselines drawn from the attributed split
    #[arg(long, default_value_t = 32)]
    pub baselines: usize,

    #[arg(long, default_value_t = 17)]
    pub baseline_seed: u64,

    /// Supporting per-sample attribution
    #[arg(long, value_enum, default_value_t = MethodKind::Ig)]
    pub method: MethodKind,

    /// Sampled-Shapley permutations; omit for exact Shapley (m <= 20)
    #[arg(long)]
    pub permutations: Option<usize>,

    /// Seed for sampled-Shapley permutations
    #[arg(long, default_value_t = 23)]
    pub sampling_seed: u64,

    /// Output directory for report files
    #[arg(long)]
    pub out_dir: PathBuf,

    /// Also export each map as a 16-bit binary PGM image
    #[arg(long)]
    pub pgm: bool,

    /// Downscale PGM maps by summing non-overlapping B x B blocks
    #[arg(long)]
    pub downscale: Option<usize>,

    /// Also write the full per-sample attribution matrix (large)
    #[arg(long)]
    pub dump_attributions: bool,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct RoiArgs {
    /// Report JSON produced by `igc`
    #[arg(long)]
    pub report: PathBuf,

    /// ROI file: one `name idx idx ...` per line, 0-based indices
    #[arg(long)]
    pub rois: PathBuf,

    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,

    /// Require the ROIs to partition the components and the totals to match
    #[arg(long)]
    pub check_partition: bool,
}

fn exit_code(err: &igc_core::Error) -> u8 {
    match err {
        igc_core::Error::DegenerateScore(_) | igc_core::Error::TrainingDiverged { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::cmd_train(&args),
        Command::Igc(args) => commands::cmd_igc(&args),
        Command::Roi(args) => commands::cmd_roi(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
