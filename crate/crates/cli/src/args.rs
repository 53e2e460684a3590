use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "sfuda-stable",
    version,
    about = "Source-free domain adaptation experiments with stable self-training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target benchmark on disk.
    GenData(GenDataArgs),
    /// Train the source model with full supervision.
    TrainSource(TrainSourceArgs),
    /// Self-train a source model on unlabeled target images.
    Adapt(AdaptArgs),
    /// Run a grid of adaptation configurations.
    Ablation(AblationArgs),
    /// Mean foreground Dice of a snapshot on one split.
    Evaluate(EvaluateArgs),
    /// Write pseudo-label overlay panels for inspection.
    PseudoLabels(PseudoLabelArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: under $SFUDA_STABLE_HOME or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory written by this tool.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// `default` (64x64, 250 per domain) or `small` (32x32, 25 per domain).
    #[arg(long)]
    pub preset: Option<String>,
    /// Train:val ratio, e.g. 4:1.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub per_domain: Option<usize>,
    /// Comma-separated `kind:magnitude` list, e.g. gamma:2.2,contrast:0.6.
    #[arg(long)]
    pub shift: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainSourceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    /// Channel widths per stage, e.g. 16,32,64.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct AdaptFlags {
    /// fairld, ld or os.
    #[arg(long)]
    pub method: Option<String>,
    /// Enable weight consolidation.
    #[arg(long)]
    pub wc: bool,
    #[arg(long)]
    pub wc_coef: Option<f64>,
    #[arg(long)]
    pub wc_normalized: bool,
    /// Use the entropy increase loss.
    #[arg(long)]
    pub ei: bool,
    /// none, min or max.
    #[arg(long)]
    pub entropy: Option<String>,
    #[arg(long)]
    pub entropy_coef: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// per_epoch or per_batch.
    #[arg(long)]
    pub refresh: Option<String>,
    #[arg(long)]
    pub no_augment: bool,
    /// Normalize with target batch statistics while self-training.
    #[arg(long)]
    pub bn_train: bool,
    /// Epochs reported as table columns.
    #[arg(long, value_delimiter = ',')]
    pub probe: Option<Vec<usize>>,
    /// Epochs whose snapshots are written.
    #[arg(long, value_delimiter = ',')]
    pub snapshot_epochs: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Source checkpoint (θ*).
    #[arg(long)]
    pub snapshot: PathBuf,
    #[command(flatten)]
    pub flags: AdaptFlags,
    /// Also write a Dice-vs-epoch curve.
    #[arg(long)]
    pub plot: bool,
    /// Complete adaptation config as JSON (used by `ablation --jobs`).
    #[arg(long, hide = true)]
    pub config_json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub snapshot: PathBuf,
    #[arg(long, default_value = "A,B,C,D")]
    pub groups: String,
    /// Parallel runs, each in its own process.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub flags: AdaptFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub snapshot: PathBuf,
    /// source-train, source-val, target-train or target-val.
    #[arg(long, default_value = "target-val")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub snapshot: PathBuf,
    #[arg(long, default_value = "target-train")]
    pub split: String,
    /// Number of images to render.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}
