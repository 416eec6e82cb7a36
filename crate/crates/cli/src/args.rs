use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use humansense::network::InputSet;
use humansense::syndata::CoverageProfile;
use humansense::trainer::CoverageStrategy;

#[derive(Debug, Clone, Parser)]
#[command(name = "humansense", version, about = "Synthetic data, training and evaluation for multitask human sensing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset split.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and score one model per reconstruction input subset.
    Ablate(AblateArgs),
    /// Run a checkpoint on PNG images.
    Infer(InferArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Preset {
    #[default]
    Default,
    Overfit,
    Ablation,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with `[network]`, `[data]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in starting point; a config file overrides it field by field.
    #[arg(long, value_enum, default_value_t)]
    pub preset: Preset,
}

fn parse_inputs(s: &str) -> Result<InputSet, String> {
    s.parse().map_err(|e: humansense::Error| e.to_string())
}

fn parse_profile(s: &str) -> Result<CoverageProfile, String> {
    s.parse().map_err(|e: humansense::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<CoverageStrategy, String> {
    s.parse().map_err(|e: humansense::Error| e.to_string())
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err("must lie in [0, 1)".into())
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples over all splits.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// full, 2d-only, 3d-only or mixed(p).
    #[arg(long, default_value = "full", value_parser = parse_profile)]
    pub profile: CoverageProfile,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of samples placed in the `test` split.
    #[arg(long, default_value_t = 0.2, value_parser = parse_fraction)]
    pub test_fraction: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds both initialization and training randomness.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total number of epochs (including those already run when resuming).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Start from the parameters of this checkpoint (file or run directory).
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    pub coverage_strategy: Option<CoverageStrategy>,
    /// Reconstruction inputs, e.g. `J,B,D`.
    #[arg(long, value_parser = parse_inputs)]
    pub ablation: Option<InputSet>,
    /// Continue the run stored in `--out`.
    #[arg(long, conflicts_with_all = ["init_from", "force"])]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Split to score; defaults to `test` when present, else `train`.
    #[arg(long)]
    pub split: Option<String>,
    /// Checkpoint file or training run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Align with rotation, translation and scale instead of a rigid motion.
    #[arg(long)]
    pub similarity: bool,
    /// One alignment for all samples instead of one per sample.
    #[arg(long)]
    pub pooled: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub train_split: String,
    #[arg(long)]
    pub eval_split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds to repeat every variant with; comma separated or repeated.
    #[arg(long = "seed", value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_parser = parse_strategy)]
    pub coverage_strategy: Option<CoverageStrategy>,
    /// Input subsets to compare, repeated; defaults to J, D, J+B, J+D and
    /// J+B+D.
    #[arg(long, value_parser = parse_inputs)]
    pub ablation: Vec<InputSet>,
    #[arg(long)]
    pub similarity: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    /// Checkpoint file or training run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write outputs of every stage instead of the last one only.
    #[arg(long)]
    pub all_stages: bool,
    #[arg(long)]
    pub force: bool,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}
