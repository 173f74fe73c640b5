//! `igpn` command-line driver.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use igpn::Error;

#[derive(Parser, Debug)]
#[command(name = "igpn", version, about = "Region-aware graph pooling network for skeleton action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic skeleton-motion dataset.
    Synth(SynthArgs),
    /// Train a model and write metrics, a checkpoint and the resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write per-sample class scores.
    Eval(EvalArgs),
    /// Report analytic multiply-accumulate counts.
    Flops(FlopsArgs),
    /// Verify every operator gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Fuse per-stream score files by weighted sum.
    Fuse(FuseArgs),
    /// Write a built-in topology as a JSON document.
    ExportTopology(ExportArgs),
    /// Write the correlation field of every pooling site as CSV rows.
    DumpAttention(DumpArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON file with generator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Built-in topology name or path to a topology JSON document.
    #[arg(long)]
    pub topology: Option<String>,
    /// Standard deviation of coordinate noise in meters.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// train or test.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Model options shared by `train` and `flops`.
#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// light or heavy.
    #[arg(long)]
    pub variant: Option<String>,
    /// Built-in topology name or path to a topology JSON document.
    #[arg(long)]
    pub topology: Option<String>,
    /// Stage output channels, comma separated (three values).
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// 1-based pooling stages, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub pooling: Option<Vec<usize>>,
    /// Remove every pooling location.
    #[arg(long)]
    pub no_pooling: bool,
    /// Projection reduction ratio r.
    #[arg(long)]
    pub reduction: Option<usize>,
    /// Correlation normalisation: tanh, sigmoid or softmax.
    #[arg(long)]
    pub sigma: Option<String>,
    /// Pool by structure only, without the correlation field.
    #[arg(long)]
    pub no_adaptive: bool,
    /// Drop the residual path of region pooling.
    #[arg(long)]
    pub no_residual: bool,
    /// Fusion weight s of the coarse branch.
    #[arg(long)]
    pub fusion_weight: Option<f64>,
    /// sum or concat.
    #[arg(long)]
    pub fusion_mode: Option<String>,
    /// Temporal kernel size (odd).
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Replace the information supplement module with a single graph convolution.
    #[arg(long)]
    pub no_ism: bool,
    /// Channels per stream of the information supplement module.
    #[arg(long)]
    pub ism_width: Option<usize>,
    /// Skip batch normalisation inside the information supplement module.
    #[arg(long)]
    pub no_ism_norm: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with `model`, `train`, `stream` and `half_frames` sections; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset JSON.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional evaluation dataset JSON; its scores are written to `scores.csv`.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Input stream: joint, bone or motion.
    #[arg(long)]
    pub stream: Option<String>,
    /// Train on half the configured frame count.
    #[arg(long)]
    pub half_frames: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Epochs at which the learning rate decays, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub decay_steps: Option<Vec<usize>>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Largest random rotation per axis in radians.
    #[arg(long)]
    pub max_rotation: Option<f64>,
    /// Seed for initialisation, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Input stream the checkpoint was trained on: joint, bone or motion.
    #[arg(long, default_value = "joint")]
    pub stream: String,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Score CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    /// JSON model configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Arithmetic precision; only f64 is supported.
    #[arg(long, default_value = "f64")]
    pub precision: String,
    /// Random seeds per check.
    #[arg(long, default_value_t = 10)]
    pub seeds: usize,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Score CSV files (repeat the flag).
    #[arg(long = "scores", required = true)]
    pub scores: Vec<PathBuf>,
    /// Nonnegative weights, comma separated; equal weights by default.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub topology: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "joint")]
    pub stream: String,
    /// Number of samples to dump, from the start of the dataset.
    #[arg(long, default_value_t = 1)]
    pub limit: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Io(_) | Error::Json(_) | Error::Data(_) | Error::Checkpoint(_) | Error::Topology(_) | Error::Partition(_) => 3,
        Error::NonFinite { .. } | Error::NonScalarOutput(_) | Error::Shape(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a).map(|()| 0),
        Command::Train(a) => commands::train(a).map(|()| 0),
        Command::Eval(a) => commands::eval(a).map(|()| 0),
        Command::Flops(a) => commands::flops(a).map(|()| 0),
        Command::Gradcheck(a) => commands::gradcheck(a).map(|ok| if ok { 0 } else { 4 }),
        Command::Fuse(a) => commands::fuse(a).map(|()| 0),
        Command::ExportTopology(a) => commands::export_topology(a).map(|()| 0),
        Command::DumpAttention(a) => commands::dump_attention(a).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("igpn: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
