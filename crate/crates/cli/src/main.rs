//! `tokensieve`: one subcommand per pipeline stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

mod manifest;
mod params;
mod stages;

#[derive(Parser)]
#[command(name = "tokensieve", version, about = "Token-level pretraining data filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every stage.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct Common {
    /// Primary input file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Primary output file (or directory for `synth`).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// JSON file with default values for any flag of this stage.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 0 picks one per core. Output never depends on it.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Encode raw JSONL documents with a merge table into a shard.
    Tokenize(TokenizeArgs),
    /// Label tokens from latent activations, or from coarse labels.
    Label(LabelArgs),
    /// Move forget labels onto a second tokenization of the same text.
    Remap(RemapArgs),
    /// Fit a logistic probe on features and shard labels.
    TrainProbe(TrainProbeArgs),
    /// Choose a probe threshold (F1-max, or a target filtered fraction).
    Calibrate(CalibrateArgs),
    /// Score tokens (or documents) with a probe.
    Score(ScoreArgs),
    /// Drop documents, mask token losses, or replace tokens.
    Filter(FilterArgs),
    /// Flip labels at a fixed rate.
    Noise(NoiseArgs),
    /// Corpus statistics: forget histograms, latent statistics, evaluation.
    Stats(StatsArgs),
    /// Loss-matched compute slowdown or loss-frontier AUC.
    Scaling(ScalingArgs),
    /// Generate a synthetic corpus with planted forget spans.
    Synth(SynthArgs),
    /// Train a weak probe, relabel with it, train a strong probe.
    Weak2strong(WeakToStrongArgs),
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TokenizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Merge table JSON.
    #[arg(long)]
    pub merges: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct LabelArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Activation JSONL.
    #[arg(long)]
    pub activations: Option<PathBuf>,
    /// Latent statistics JSON.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    /// Coarse (document or sentence) labels JSONL; replaces activations.
    #[arg(long)]
    pub coarse: Option<PathBuf>,
    #[arg(long)]
    pub k_sd: Option<f64>,
    #[arg(long)]
    pub m_min: Option<usize>,
    #[arg(long)]
    pub expansion_threshold: Option<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct RemapArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Shard with the target tokenization (byte spans required).
    #[arg(long)]
    pub target: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainProbeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Shard holding the labels for the feature rows.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// L2 strength.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Train on this share of rows, drawn with the seed.
    #[arg(long)]
    pub sample: Option<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Probe whose threshold is set.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Shard with forget labels (F1 calibration).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Filter this share of units instead of maximising F1.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregate {
    Max,
    Mean,
    FractionAbove,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Shard whose tokens the feature rows describe.
    #[arg(long)]
    pub shard: Option<PathBuf>,
    /// Collapse token scores to document scores (written as JSONL).
    #[arg(long, value_enum)]
    pub aggregate: Option<Aggregate>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Document,
    #[value(alias = "loss-mask")]
    #[serde(alias = "loss-mask")]
    Mask,
    Removal,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct FilterArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Take the threshold from this probe.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Document scores JSONL (document mode).
    #[arg(long)]
    pub doc_scores: Option<PathBuf>,
    /// Use the shard's forget labels as scores (1 forget, 0 retain).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub from_labels: Option<bool>,
    #[arg(long)]
    pub hidden_id: Option<u32>,
    /// Merge table whose `hidden` special token is used in removal mode.
    #[arg(long)]
    pub merges: Option<PathBuf>,
    /// Shard with ground-truth labels for the report.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Training step from which the trainer should apply the masks.
    #[arg(long)]
    pub onset_step: Option<u64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct NoiseArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub flip_rate: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsKind {
    Histogram,
    Latents,
    Eval,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct StatsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub kind: Option<StatsKind>,
    /// Histogram bucket edges.
    #[arg(long, value_delimiter = ',')]
    pub edges: Option<Vec<f64>>,
    /// Latents to summarise (default: every latent seen).
    #[arg(long, value_delimiter = ',')]
    pub latent_ids: Option<Vec<u32>>,
    /// Count unlisted tokens of this shard as zero activations.
    #[arg(long)]
    pub shard: Option<PathBuf>,
    /// Shard with forget labels (eval).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ScalingArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Series label of the unfiltered baseline.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Series to compare (default: every other series).
    #[arg(long)]
    pub filtered: Option<String>,
    /// Input is `series,retain_loss,forget_loss`; report frontier AUCs.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub frontier: Option<bool>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    pub docs: Option<usize>,
    /// Target expected share of forget tokens; overrides `span_rate`.
    #[arg(long)]
    pub forget_fraction: Option<f64>,
    #[arg(long)]
    pub span_rate: Option<f64>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub span_min: Option<usize>,
    #[arg(long)]
    pub span_max: Option<usize>,
    #[arg(long)]
    pub retain_vocab: Option<u32>,
    #[arg(long)]
    pub forget_vocab: Option<u32>,
    #[arg(long)]
    pub latents: Option<u32>,
    #[arg(long)]
    pub m_min: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Margin of the weaker feature file.
    #[arg(long)]
    pub weak_margin: Option<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct WeakToStrongArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Strong feature file (same rows as `--input`).
    #[arg(long)]
    pub strong: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Share of rows with ground truth for the weak probe.
    #[arg(long)]
    pub weak_share: Option<f64>,
    /// Share of rows held out for evaluation.
    #[arg(long)]
    pub eval_share: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

/// How a run ends when it does not succeed.
#[derive(Debug)]
pub enum Failure {
    MissingInput(PathBuf),
    Usage(String),
    Stage(&'static str, anyhow::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::MissingInput(_) | Failure::Usage(_) => 2,
            Failure::Stage(..) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::MissingInput(p) => write!(f, "input file not found: {}", p.display()),
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Stage(stage, e) => write!(f, "{stage}: {e:#}"),
        }
    }
}

/// Returns the path if it names an existing file.
pub fn require<'a>(path: Option<&'a PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    let p = path.ok_or_else(|| Failure::Usage(format!("--{flag} is required")))?;
    if !p.exists() {
        return Err(Failure::MissingInput(p.clone()));
    }
    Ok(p)
}

pub fn optional(path: Option<&PathBuf>) -> Result<Option<&Path>, Failure> {
    match path {
        None => Ok(None),
        Some(p) if p.exists() => Ok(Some(p)),
        Some(p) => Err(Failure::MissingInput(p.clone())),
    }
}

pub fn output(common: &Common) -> Result<&Path, Failure> {
    common
        .output
        .as_deref()
        .ok_or_else(|| Failure::Usage("--output is required".into()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    use params::resolve;
    match cli.command {
        Command::Tokenize(a) => stages::tokenize(&resolve(&a, a.common.config.as_ref())?),
        Command::Label(a) => stages::label(&resolve(&a, a.common.config.as_ref())?),
        Command::Remap(a) => stages::remap(&resolve(&a, a.common.config.as_ref())?),
        Command::TrainProbe(a) => stages::train_probe(&resolve(&a, a.common.config.as_ref())?),
        Command::Calibrate(a) => stages::calibrate(&resolve(&a, a.common.config.as_ref())?),
        Command::Score(a) => stages::score(&resolve(&a, a.common.config.as_ref())?),
        Command::Filter(a) => stages::filter(&resolve(&a, a.common.config.as_ref())?),
        Command::Noise(a) => stages::noise(&resolve(&a, a.common.config.as_ref())?),
        Command::Stats(a) => stages::stats(&resolve(&a, a.common.config.as_ref())?),
        Command::Scaling(a) => stages::scaling(&resolve(&a, a.common.config.as_ref())?),
        Command::Synth(a) => stages::synth(&resolve(&a, a.common.config.as_ref())?),
        Command::Weak2strong(a) => stages::weak2strong(&resolve(&a, a.common.config.as_ref())?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOKENSIEVE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
