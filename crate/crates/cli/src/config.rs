//! Command options. Every flag can also be set in a TOML file: top-level
//! `seed`, and one table per command whose keys are the flag names. Values
//! given on the command line win.

use std::path::{Path, PathBuf};

use clap::Args;
use evitraffic::distill::SplitMode;
use evitraffic::evidential::RegularizerMode;
use evitraffic::lwr::CorpusRecipe;
use evitraffic::model::DecodeMode;
use serde::Deserialize;

use crate::Failure;

macro_rules! merge_fields {
    ($cli:ident, $file:ident; $($f:ident),* $(,)?) => {
        $( if $cli.$f.is_none() { $cli.$f = $file.$f.take(); } )*
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Decode {
    FreeRun,
    TeacherForced,
}

impl From<Decode> for DecodeMode {
    fn from(d: Decode) -> Self {
        match d {
            Decode::FreeRun => DecodeMode::FreeRun,
            Decode::TeacherForced => DecodeMode::TeacherForced,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PreserveLowest,
    RemoveLowest,
}

impl From<Mode> for SplitMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::PreserveLowest => SplitMode::PreserveLowest,
            Mode::RemoveLowest => SplitMode::RemoveLowest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    Plain,
    NonNegative,
}

impl From<Regularizer> for RegularizerMode {
    fn from(r: Regularizer) -> Self {
        match r {
            Regularizer::Plain => RegularizerMode::Plain,
            Regularizer::NonNegative => RegularizerMode::NonNegative,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SimulateArgs {
    /// Output corpus file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also export the corpus as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Road graph file; defaults to the 16-cell reference corridor.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Use a straight two-lane chain of this many cells instead.
    #[arg(long, conflicts_with = "graph")]
    pub chain_nodes: Option<usize>,
    /// Recorded steps per scenario.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Noisy copies of every demand pattern.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Keep only the named demand patterns (repeatable).
    #[arg(long = "pattern")]
    pub patterns: Option<Vec<String>>,
    /// Scenarios per incident plan; 0 disables incidents.
    #[arg(long)]
    pub incident_count: Option<usize>,
    /// Lognormal demand noise sigma.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Detector speed noise, km/h.
    #[arg(long)]
    pub speed_noise: Option<f64>,
    /// Full recipe; only settable from the config file.
    #[arg(skip)]
    pub recipe: Option<CorpusRecipe>,
}

impl SimulateArgs {
    pub fn merge(&mut self, mut file: Self) {
        merge_fields!(self, file; out, csv, graph, chain_nodes, horizon, stride, repeats, patterns, incident_count, noise_sigma, speed_noise, recipe);
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainArgs {
    /// Training corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch log CSV; defaults to `<checkpoint>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint (model, optimiser state and iteration).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub key_dim: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Regulariser weight.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum)]
    pub regularizer: Option<Regularizer>,
    /// Scheduled-sampling decay constant.
    #[arg(long)]
    pub decay_c: Option<f64>,
    #[arg(long)]
    pub flow_loss_weight: Option<f64>,
    /// Total variance, (km/h)², attached to observed decoder inputs.
    #[arg(long)]
    pub input_variance: Option<f64>,
    /// Accept the closed lower bound when choosing receptive-field degrees.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub closed_bound: Option<bool>,
}

impl TrainArgs {
    pub fn merge(&mut self, mut file: Self) {
        merge_fields!(self, file; corpus, checkpoint, log, resume, epochs, batch_size, learning_rate, max_iterations,
            grad_clip, hidden_dim, key_dim, feature_dim, epsilon, regularizer, decay_c, flow_loss_weight,
            input_variance, closed_bound);
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Held-out corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Metrics CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-horizon calibration CSV.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub decode: Option<Decode>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl EvaluateArgs {
    pub fn merge(&mut self, mut file: Self) {
        merge_fields!(self, file; checkpoint, corpus, out, calibration, decode, batch_size);
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct DistillArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Report file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Percentage of the ranking forming the low-uncertainty part.
    #[arg(long)]
    pub pct: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Shorthand for `--mode preserve-lowest --pct P`.
    #[arg(long, value_name = "P", conflicts_with_all = ["pct", "mode", "remove_lowest"])]
    pub preserve_lowest: Option<f64>,
    /// Shorthand for `--mode remove-lowest --pct P`.
    #[arg(long, value_name = "P", conflicts_with_all = ["pct", "mode"])]
    pub remove_lowest: Option<f64>,
    /// Write the kept samples as a corpus.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Retrain from scratch on the kept samples and write this checkpoint.
    #[arg(long)]
    pub retrain: Option<PathBuf>,
    /// Decoder inputs used when scoring.
    #[arg(long, value_enum)]
    pub decode: Option<Decode>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl DistillArgs {
    pub fn merge(&mut self, mut file: Self) {
        merge_fields!(self, file; checkpoint, corpus, report, pct, mode, preserve_lowest, remove_lowest, out, retrain,
            decode, batch_size);
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct StreamArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Incoming samples, in arrival order.
    #[arg(long)]
    pub incoming: Option<PathBuf>,
    /// Take the threshold from a distillation report.
    #[arg(long, conflicts_with = "threshold")]
    pub threshold_report: Option<PathBuf>,
    /// Threshold in km/h.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output corpus of kept samples.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-window acceptance CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Prepend the samples of this corpus to the output.
    #[arg(long)]
    pub merge: Option<PathBuf>,
    /// Samples per acceptance window.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, value_enum)]
    pub decode: Option<Decode>,
}

impl StreamArgs {
    pub fn merge(&mut self, mut file: Self) {
        merge_fields!(self, file; checkpoint, incoming, threshold_report, threshold, out, log, merge, window, decode);
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub simulate: SimulateArgs,
    pub train: TrainArgs,
    pub evaluate: EvaluateArgs,
    pub distill: DistillArgs,
    pub stream: StreamArgs,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Unwraps a required option.
pub fn required<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::Usage(format!("missing required option --{flag}")))
}
