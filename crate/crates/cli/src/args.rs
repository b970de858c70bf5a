//! Command-line flags.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "sparsegate", version, about = "Train, prune and run sparse networks with learned binary gates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a gated network and write a run directory.
    Train(TrainArgs),
    /// Repeat a training run from its manifest.
    Rerun {
        /// manifest.json of an earlier run.
        #[arg(long)]
        manifest: PathBuf,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network per (λ1, λ2, init) grid cell and write a CSV.
    Sweep(SweepArgs),
    /// Threshold the gates of a checkpoint and export a sparse model.
    Prune(PruneArgs),
    /// Evaluate a sparse model, optionally against its source checkpoint.
    Eval(EvalArgs),
    /// Time dense against CSR matrix products.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawArg {
    Ml,
    Sampled,
}

/// Data and architecture selection shared by the commands that load data.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// `mnist:<dir>`, `mnist` (directory from SPARSEGATE_DATA_DIR), or `synth`.
    #[arg(long)]
    pub data: String,
    /// Training images taken from the start of the canonical order.
    #[arg(long, default_value_t = 10_000)]
    pub train_limit: usize,
    /// Test images to evaluate on (all when omitted).
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Training samples for `synth`; a further fifth is held out for testing.
    #[arg(long, default_value_t = 2_000)]
    pub synth_n: usize,
    /// Seed of the synthetic data.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

/// Flags of a single training run.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// `lenet5` or `mlp:<in>,<hidden>...,<classes>`.
    #[arg(long)]
    pub arch: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// Weight of Σ g(1−g). Penalties are summed over gates, so useful values
    /// shrink as the gated layers grow.
    #[arg(long, default_value_t = 0.0)]
    pub lambda1: f64,
    /// Weight of Σ g (summed over gates).
    #[arg(long, default_value_t = 0.0)]
    pub lambda2: f64,
    /// Weight of Σ w² over gated layers.
    #[arg(long, default_value_t = 0.0)]
    pub lambda3: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DrawArg::Ml)]
    pub draw: DrawArg,
    /// Initial value of every gate.
    #[arg(long, default_value_t = 0.6)]
    pub gate_init: f32,
    /// `<checkpoint>:<f>[,<f>...]`: copy weights from a checkpoint and open the
    /// gates of the top fraction `f` of weights per layer.
    #[arg(long)]
    pub preinit: Option<String>,
    /// Comma-separated names of the layers to gate (default: all).
    #[arg(long, value_delimiter = ',')]
    pub gated: Option<Vec<String>>,
    /// Keep the gates fixed during training.
    #[arg(long)]
    pub freeze_gates: bool,
    /// Mask draws for the sampled sparsity statistics.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    /// Output run directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub arch: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// λ1 values.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub lambda1: Vec<f64>,
    /// λ2 values.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub lambda2: Vec<f64>,
    /// Gate initial values.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "0.6")]
    pub init: Vec<f32>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda3: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DrawArg::Ml)]
    pub mode: DrawArg,
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    #[arg(long, value_delimiter = ',')]
    pub gated: Option<Vec<String>>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output SPNN path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the sparsity table as CSV.
    #[arg(long)]
    pub table_csv: Option<PathBuf>,
    /// Run identifier recorded in the model metadata (default: derived from
    /// the sibling manifest.json).
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// SPNN model to evaluate.
    #[arg(long)]
    pub model: PathBuf,
    /// Checkpoint to compare against.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 512)]
    pub m: usize,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Sparsity levels in percent.
    #[arg(long, value_delimiter = ',', default_value = "0,50,90,95,99")]
    pub sparsities: Vec<f64>,
    /// Timed repetitions per level (at least 10).
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(10..))]
    pub reps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}
