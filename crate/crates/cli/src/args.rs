use std::path::PathBuf;

use cavstat::simulate::{AlphaChoice, ExperimentKind, SigmaSource};
use cavstat::statfun::Sharpness;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "cavstat", version, about = "CAV estimation, TCAV scoring and Monte Carlo checks", args_override_self = true)]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to CAVSTAT_THREADS).
    #[arg(long, global = true)]
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Refuse to run without an explicit --seed.
    #[arg(long, global = true, num_args = 0..=1, require_equals = true, default_value = "false", default_missing_value = "true", action = clap::ArgAction::Set)]
    pub strict: bool,
    /// JSON file mirroring the command-line flags.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub spec: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Fit a CAV from concept and random activations.
    Cav(CavArgs),
    /// Score gradients against a CAV.
    Score(ScoreArgs),
    /// Closed-form mean and variance of a TCAV variant.
    Predict(PredictArgs),
    /// Monte Carlo sweeps of the Gaussian model.
    Simulate(SimulateArgs),
    /// Predict (and optionally simulate) CAV classification error.
    Classify(ClassifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Pattern,
    Fast,
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args, Serialize)]
pub struct CavArgs {
    #[arg(long)]
    pub concept: PathBuf,
    #[arg(long)]
    pub random: PathBuf,
    #[arg(long, value_enum, default_value = "pattern")]
    pub method: MethodArg,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Output CAVF path; a `.json` sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DtypeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Indicator,
    Multi,
    Alpha,
    Dagger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrateArg {
    Star,
    Dagger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectiveN {
    /// N = n₁ + n₂.
    Both,
    /// N = n₂ (concept samples only).
    Concept,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub grads: PathBuf,
    /// CAV file (not used by multi mode).
    #[arg(long)]
    pub cav: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "alpha")]
    pub mode: ScoreMode,
    /// Fixed sharpness on the scored scale; skips calibration.
    #[arg(long)]
    pub alpha: Option<Sharpness>,
    #[arg(long, value_enum, default_value = "star")]
    pub calibrate: CalibrateArg,
    /// Number of subsets the α* calibration (and multi mode) refers to.
    #[arg(long, default_value_t = 10)]
    pub s: usize,
    #[arg(long, num_args = 0..=1, require_equals = true, default_value = "true", default_missing_value = "true", action = clap::ArgAction::Set)]
    pub normalize: bool,
    /// Training sample count N; read from the CAV sidecar when absent.
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub effective_n: EffectiveN,
    /// Known raw-scale σ replacing σ̂_eff.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Multi mode: concept activations.
    #[arg(long)]
    pub concept: Option<PathBuf>,
    /// Multi mode: random activations.
    #[arg(long)]
    pub random: Option<PathBuf>,
    /// Multi mode: estimator for the per-subset CAVs.
    #[arg(long, value_enum, default_value = "pattern")]
    pub method: MethodArg,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score at a grid of sharpness values and write it as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMethod {
    Indicator,
    Multi,
    Alpha,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 100)]
    pub n_total: usize,
    #[arg(long, default_value_t = 10)]
    pub s: usize,
    #[arg(long, value_enum, default_value = "alpha")]
    pub method: PredictMethod,
    /// Sharpness: a number, `inf`, `star` or `dagger`.
    #[arg(long, default_value = "star")]
    pub alpha: AlphaChoice,
    /// Output prefix for `.json` and `.csv`; prints JSON when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaSourceArg {
    Known,
    Estimated,
}

impl From<SigmaSourceArg> for SigmaSource {
    fn from(s: SigmaSourceArg) -> Self {
        match s {
            SigmaSourceArg::Known => SigmaSource::Known,
            SigmaSourceArg::Estimated => SigmaSource::Estimated,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// vary_mu, vary_N, vary_s or classification.
    #[arg(long)]
    pub kind: ExperimentKind,
    /// JSON experiment config; missing fields take the defaults of `kind`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub mu: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub n_total: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub s: Option<Vec<usize>>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<AlphaChoice>>,
    #[arg(long, value_enum)]
    pub sigma_source: Option<SigmaSourceArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Output prefix for `.json` and `.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentArg {
    Fixed,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsArg {
    Empirical,
    Balanced,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub concept: Option<PathBuf>,
    #[arg(long)]
    pub random: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pattern")]
    pub method: MethodArg,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum, default_value = "fixed")]
    pub treatment: TreatmentArg,
    #[arg(long, value_enum)]
    pub weights: Option<WeightsArg>,
    /// Run the synthetic Toeplitz experiment instead of fitting files.
    #[arg(long, num_args = 0..=1, require_equals = true, default_value = "false", default_missing_value = "true", action = clap::ArgAction::Set)]
    pub synthetic: bool,
    /// JSON classification config for --synthetic.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub n1: Option<usize>,
    #[arg(long)]
    pub n2: Option<usize>,
    #[arg(long)]
    pub test_points: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Output prefix for `.json` and `.csv`.
    #[arg(long)]
    pub out: PathBuf,
}
