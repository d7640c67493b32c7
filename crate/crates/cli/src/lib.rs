//! Command implementations behind the `mrad` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
mod render;

pub use commands::{
    cmd_build_memory, cmd_eval, cmd_score, cmd_stats, cmd_subsample, cmd_synth, cmd_train,
    BankSummary, ScoreRow, ScoreSummary, TrainSummary, SCHEMA_VERSION,
};

#[derive(Debug, Parser)]
#[command(name = "mrad", version, about = "Memory-retrieval anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a two-level memory bank from an auxiliary feature pack.
    BuildMemory(BuildMemoryArgs),
    /// Score every image of a pack against a bank.
    Score(ScoreArgs),
    /// Fine-tune the retrieval metric on an auxiliary pack.
    Train(TrainArgs),
    /// Compute detection metrics from a score directory.
    Eval(EvalArgs),
    /// Dataset-level retrieval statistics of a pack against a bank.
    Stats(StatsArgs),
    /// Randomly subsample the patch-level memory of a bank.
    Subsample(SubsampleArgs),
    /// Write a synthetic auxiliary/target pair of feature packs.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct BuildMemoryArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a JSON build log (sizes and warnings) here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Learned metric weights; train-free retrieval when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Fraction of pixels averaged into the image score.
    #[arg(long, default_value_t = 0.01)]
    pub topk: f64,
    #[arg(long, default_value_t = 0.0)]
    pub smooth_sigma: f64,
    /// Score images by top-k pooling of the pixel map alone.
    #[arg(long)]
    pub pixel_only: bool,
    /// Also write a colormapped PNG per map.
    #[arg(long)]
    pub render_png: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.20)]
    pub rho_seg: f64,
    #[arg(long, default_value_t = 0.05)]
    pub rho_cls: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory written by `score`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON object mapping image id to category.
    #[arg(long)]
    pub categories: Option<PathBuf>,
    /// Also write a percent table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory for aux.fpk, target.fpk and categories.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub images_per_category: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
}

/// Process exit code for a failed command: 2 for I/O, 3 for invalid input,
/// 4 for numerical failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mrad_core::Error>() {
            return match e.kind() {
                mrad_core::ErrorKind::Io => 2,
                mrad_core::ErrorKind::Validation => 3,
                mrad_core::ErrorKind::Numerical => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<serde_json::Error>() {
            return if e.is_io() { 2 } else { 3 };
        }
    }
    3
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildMemory(a) => println!("{}", cmd_build_memory(&a)?),
        Command::Score(a) => println!("{}", cmd_score(&a)?),
        Command::Train(a) => println!("{}", cmd_train(&a)?),
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            print!("{}", report.to_csv());
        }
        Command::Stats(a) => {
            let stats = cmd_stats(&a)?;
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::Subsample(a) => println!("{}", cmd_subsample(&a)?),
        Command::Synth(a) => cmd_synth(&a)?,
    }
    Ok(())
}
