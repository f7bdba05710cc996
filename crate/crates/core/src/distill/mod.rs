//! Knowledge-uncertainty based dataset distillation.
//!
//! Samples are scored by the square root of the mean knowledge variance of
//! their 15-step speed forecast, ranked, and split at a percentile. The same
//! score drives an online filter for incoming samples. [`metrics`] holds the
//! congestion-weighted error and the calibration report.

pub mod metrics;
pub mod stream;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::Stamp;
use crate::lwr::Sample;
use crate::model::{DecodeMode, Model, ModelError, Prediction};

pub use metrics::{calibration_report, evaluate, weighted_mae, CalibrationReport, Evaluation, HorizonRow, Metrics};
pub use stream::{stream_filter, StreamOutcome, StreamWindow};

/// Speeds below this are congested, km/h.
pub const CONGESTION_KMH: f64 = 60.0;
/// Error multiplier for congested points in the weighted MAE.
pub const CONGESTION_WEIGHT: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("{0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("report format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DistillError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: u64,
    /// `sqrt(mean knowledge variance)` over every node and decoder step, km/h.
    pub ku_mean: f64,
    /// Any target speed below [`CONGESTION_KMH`].
    pub congested: bool,
}

/// Which side of the ranking a split keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Keep the lowest `pct` percent.
    PreserveLowest,
    /// Drop the lowest `pct` percent.
    RemoveLowest,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::PreserveLowest => "preserve-lowest",
            SplitMode::RemoveLowest => "remove-lowest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "preserve-lowest" => Some(SplitMode::PreserveLowest),
            "remove-lowest" => Some(SplitMode::RemoveLowest),
            _ => None,
        }
    }
}

pub fn ku_mean(p: &Prediction) -> Result<f64> {
    let mut acc = 0.0;
    for i in 0..p.speed.len() {
        acc += p.breakdown(i)?.knowledge_var;
    }
    Ok((acc / p.speed.len() as f64).sqrt())
}

fn target_congested(s: &Sample, from: usize) -> bool {
    s.speed[from..].iter().any(|&v| f64::from(v) < CONGESTION_KMH)
}

/// Scores every sample with a frozen model.
pub fn score_samples(model: &Model, samples: &[&Sample], mode: DecodeMode, batch_size: usize) -> Result<Vec<SampleScore>> {
    let from = model.config().encoder_steps * model.graph().num_nodes();
    let preds = model.predict(samples, mode, batch_size)?;
    preds
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            Ok(SampleScore {
                sample_id: s.id,
                ku_mean: ku_mean(p)?,
                congested: target_congested(s, from),
            })
        })
        .collect()
}

/// Linear interpolation between order statistics at rank `pct/100 · (n−1)`.
pub fn threshold_at_percentile(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(DistillError::Empty("no scores to take a percentile of".into()));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(DistillError::Invalid(format!("percentile {pct} outside [0, 100]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::Invalid("scores must be finite".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

/// Sample ids ascending by score, ties broken by id.
pub fn ranking(scores: &[SampleScore]) -> Vec<u64> {
    let mut s: Vec<&SampleScore> = scores.iter().collect();
    s.sort_by(|a, b| a.ku_mean.total_cmp(&b.ku_mean).then(a.sample_id.cmp(&b.sample_id)));
    s.into_iter().map(|x| x.sample_id).collect()
}

/// Outcome of one distillation split.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub mode: SplitMode,
    pub percentile: f64,
    /// `pct`-th percentile of the scores, km/h.
    pub threshold: f64,
    /// Scores in ranking order.
    pub ranked: Vec<SampleScore>,
    pub kept: Vec<u64>,
    pub removed: Vec<u64>,
}

/// Splits by rank: the lowest `round(pct · n / 100)` samples of the ranking
/// form the lower part, which `mode` keeps or drops.
pub fn distill_report(scores: &[SampleScore], pct: f64, mode: SplitMode) -> Result<DistillReport> {
    let values: Vec<f64> = scores.iter().map(|s| s.ku_mean).collect();
    let threshold = threshold_at_percentile(&values, pct)?;
    let mut ranked: Vec<SampleScore> = scores.to_vec();
    ranked.sort_by(|a, b| a.ku_mean.total_cmp(&b.ku_mean).then(a.sample_id.cmp(&b.sample_id)));
    for w in ranked.windows(2) {
        if w[0].sample_id == w[1].sample_id {
            return Err(DistillError::Invalid(format!("duplicate sample id {}", w[0].sample_id)));
        }
    }
    let k = ((pct / 100.0) * ranked.len() as f64).round() as usize;
    let lower: Vec<u64> = ranked[..k].iter().map(|s| s.sample_id).collect();
    let upper: Vec<u64> = ranked[k..].iter().map(|s| s.sample_id).collect();
    let (kept, removed) = match mode {
        SplitMode::PreserveLowest => (lower, upper),
        SplitMode::RemoveLowest => (upper, lower),
    };
    Ok(DistillReport {
        mode,
        percentile: pct,
        threshold,
        ranked,
        kept,
        removed,
    })
}

/// Applies a split to the samples it was computed from.
pub fn split_preserve_remove(samples: &[Sample], scores: &[SampleScore], pct: f64, mode: SplitMode) -> Result<(Vec<Sample>, DistillReport)> {
    if samples.len() != scores.len() {
        return Err(DistillError::Shape(format!(
            "{} samples but {} scores",
            samples.len(),
            scores.len()
        )));
    }
    let report = distill_report(scores, pct, mode)?;
    if report.kept.is_empty() {
        return Err(DistillError::Empty(format!(
            "{} at {pct}% leaves no samples",
            mode.as_str()
        )));
    }
    let keep: std::collections::HashSet<u64> = report.kept.iter().copied().collect();
    let subset = samples.iter().filter(|s| keep.contains(&s.id)).cloned().collect();
    Ok((subset, report))
}

impl DistillReport {
    pub fn to_text(&self, stamp: &Stamp) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", stamp.csv_comment());
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "percentile = {}", self.percentile);
        let _ = writeln!(s, "threshold_kmh = {:e}", self.threshold);
        let _ = writeln!(s, "samples = {}", self.ranked.len());
        let _ = writeln!(s, "kept = {}", self.kept.len());
        let _ = writeln!(s, "removed = {}", self.removed.len());
        s.push_str("[ranking]\nrank,sample_id,ku_mean_kmh,congested,kept\n");
        let kept: std::collections::HashSet<u64> = self.kept.iter().copied().collect();
        for (i, r) in self.ranked.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{:e},{},{}",
                i,
                r.sample_id,
                r.ku_mean,
                u8::from(r.congested),
                u8::from(kept.contains(&r.sample_id))
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| DistillError::Format(m);
        let mut mode = None;
        let mut percentile = None;
        let mut threshold = None;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        for (no, line) in lines.by_ref() {
            if line.trim() == "[ranking]" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", no + 1)))?;
            let v = v.trim();
            match k.trim() {
                "mode" => mode = Some(SplitMode::parse(v).ok_or_else(|| bad(format!("line {}: unknown mode {v}", no + 1)))?),
                "percentile" => percentile = Some(v.parse().map_err(|_| bad(format!("line {}: bad percentile", no + 1)))?),
                "threshold_kmh" => threshold = Some(v.parse().map_err(|_| bad(format!("line {}: bad threshold", no + 1)))?),
                _ => {}
            }
        }
        let mut ranked = Vec::new();
        let mut kept = Vec::new();
        let mut removed = Vec::new();
        for (no, line) in lines {
            if line.starts_with("rank,") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("line {}: expected 5 fields", no + 1)));
            }
            let parse_err = || bad(format!("line {}: malformed ranking row", no + 1));
            let id: u64 = f[1].parse().map_err(|_| parse_err())?;
            ranked.push(SampleScore {
                sample_id: id,
                ku_mean: f[2].parse().map_err(|_| parse_err())?,
                congested: f[3] == "1",
            });
            if f[4] == "1" {
                kept.push(id);
            } else {
                removed.push(id);
            }
        }
        Ok(Self {
            mode: mode.ok_or_else(|| bad("missing mode".into()))?,
            percentile: percentile.ok_or_else(|| bad("missing percentile".into()))?,
            threshold: threshold.ok_or_else(|| bad("missing threshold_kmh".into()))?,
            ranked,
            kept,
            removed,
        })
    }
}
