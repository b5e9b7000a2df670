use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ssip", version, about = "Personalized speech intelligibility prediction from support pairs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a CPC-layout directory into a calibrated manifest and fold files.
    Prepare(PrepareArgs),
    /// Re-calibrate the scores of a manifest to a presentation level.
    Calibrate(CalibrateArgs),
    /// Train a model on one fold.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test listeners of a fold.
    Evaluate(EvaluateArgs),
    /// Predict query scores from a listener's support pairs.
    Predict(PredictArgs),
    /// Train and evaluate one model per support count and fold.
    SweepSupport(SweepArgs),
    /// Correlate hearing loss with intelligibility and presentation level.
    Analyze(AnalyzeArgs),
    /// Re-render plots from a sweep or analysis result file.
    Plot(PlotArgs),
    /// Write a deterministic synthetic dataset in the CPC layout.
    #[command(hide = true)]
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Foundation-backbone setup with the full-size model.
    Full,
    /// Toy backbone and a small model that trains on one core.
    Desk,
}

/// Where the training configuration comes from.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML training configuration; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    pub preset: Preset,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Record the run as deterministic (training is always single-threaded).
    #[arg(long)]
    pub deterministic: bool,
}

/// Which listeners play which role.
#[derive(Debug, Args)]
pub struct FoldArgs {
    /// Fold index (1-3), read from `folds/fold<k>.json` next to the manifest.
    #[arg(long, conflicts_with = "split")]
    pub fold: Option<u8>,
    /// Explicit split file.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// CPC-layout root with `metadata/` and `signals/`.
    #[arg(long)]
    pub cpc: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Calibration curve file; the built-in curves are used otherwise.
    #[arg(long)]
    pub curves: Option<PathBuf>,
    /// Signal directory if not `<cpc>/signals`.
    #[arg(long)]
    pub signals: Option<PathBuf>,
    /// Seed of the listener shuffle that defines the folds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 65.0)]
    pub target_db: f64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub curves: Option<PathBuf>,
    #[arg(long, default_value_t = 65.0)]
    pub target_db: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub fold: FoldArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub n_support: Option<usize>,
    /// Train the audiogram-conditioned baseline instead.
    #[arg(long)]
    pub baseline: bool,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub fold: FoldArgs,
    /// Support pairs per test listener; defaults to the training value
    /// (zero for baseline checkpoints).
    #[arg(long)]
    pub n_support: Option<usize>,
    /// Seed of the fixed test episodes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of labeled support pairs.
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Manifest of query audios; any scores present are kept as targets.
    #[arg(long)]
    pub queries: PathBuf,
    /// Use only this many support pairs per listener (in manifest order).
    #[arg(long)]
    pub n_support: Option<usize>,
    /// Output JSON lines file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Strictly increasing support counts.
    #[arg(long, value_delimiter = ',', default_values_t = ssip_core::pipeline::DEFAULT_SUPPORT_COUNTS)]
    pub counts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u8, 2, 3])]
    pub folds: Vec<u8>,
    /// Seed of the fixed test episodes.
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    #[arg(long)]
    pub no_baseline: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// `sweep.json` or `analysis.json`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 27)]
    pub listeners: usize,
    #[arg(long, default_value_t = 40)]
    pub samples: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub curves: Option<PathBuf>,
}
