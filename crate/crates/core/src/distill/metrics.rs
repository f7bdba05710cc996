use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{DistillError, Result, CONGESTION_KMH, CONGESTION_WEIGHT};
use crate::artifact::Stamp;
use crate::lwr::Sample;
use crate::model::{DecodeMode, Model, Prediction};

/// Mean of `w · |pred − true|` with `w = 4` where the true speed is below
/// 60 km/h and 1 elsewhere.
pub fn weighted_mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(DistillError::Shape(format!(
            "{} predictions for {} observations",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(DistillError::Empty("no points to score".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let w = if *t < CONGESTION_KMH { CONGESTION_WEIGHT } else { 1.0 };
            w * (p - t).abs()
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Point-wise forecast errors. MAPE is in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub points: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Over points whose true value is at least [`MAPE_FLOOR`].
    pub mape: f64,
    /// Congestion-weighted MAE; only defined for speed.
    pub weighted_mae: Option<f64>,
}

/// True values below this are left out of the MAPE denominator.
pub const MAPE_FLOOR: f64 = 1.0;

impl Metrics {
    pub fn from_points(pred: &[f64], truth: &[f64], congestion_weighted: bool) -> Result<Self> {
        let weighted = weighted_mae(pred, truth)?;
        let n = pred.len() as f64;
        let mae = pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let rmse = (pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        let (ape, cnt) = pred
            .iter()
            .zip(truth)
            .filter(|(_, b)| **b >= MAPE_FLOOR)
            .fold((0.0, 0usize), |(s, c), (a, b)| (s + (a - b).abs() / b, c + 1));
        Ok(Self {
            points: pred.len(),
            mae,
            rmse,
            mape: if cnt > 0 { 100.0 * ape / cnt as f64 } else { 0.0 },
            weighted_mae: congestion_weighted.then_some(weighted),
        })
    }
}

/// Speed and flow errors of one model on one sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub speed: Metrics,
    pub flow: Metrics,
}

struct Collected {
    preds: Vec<Prediction>,
    speed: (Vec<f64>, Vec<f64>),
    flow: (Vec<f64>, Vec<f64>),
}

fn collect(model: &Model, samples: &[&Sample], mode: DecodeMode, batch_size: usize) -> Result<Collected> {
    if samples.is_empty() {
        return Err(DistillError::Empty("evaluation set is empty".into()));
    }
    let from = model.config().encoder_steps * model.graph().num_nodes();
    let preds = model.predict(samples, mode, batch_size)?;
    let mut c = Collected {
        preds: Vec::new(),
        speed: (Vec::new(), Vec::new()),
        flow: (Vec::new(), Vec::new()),
    };
    for (p, s) in preds.iter().zip(samples) {
        c.speed.0.extend_from_slice(&p.speed);
        c.speed.1.extend(s.speed[from..].iter().map(|&v| f64::from(v)));
        c.flow.0.extend_from_slice(&p.flow);
        c.flow.1.extend(s.flow[from..].iter().map(|&v| f64::from(v)));
    }
    c.preds = preds;
    Ok(c)
}

pub fn evaluate(model: &Model, samples: &[&Sample], mode: DecodeMode, batch_size: usize) -> Result<Evaluation> {
    let c = collect(model, samples, mode, batch_size)?;
    Ok(Evaluation {
        speed: Metrics::from_points(&c.speed.0, &c.speed.1, true)?,
        flow: Metrics::from_points(&c.flow.0, &c.flow.1, false)?,
    })
}

/// One horizon of the calibration table. The uncertainty columns are root
/// mean variances, so `total² = data² + knowledge²` holds exactly and the
/// total column is directly comparable with the RMSE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    /// 1-based decoder step; 0 for the all-horizon summary.
    pub horizon: usize,
    pub points: usize,
    pub rmse: f64,
    pub data_std: f64,
    pub knowledge_std: f64,
    pub total_std: f64,
    /// Mean of the per-point total standard deviations.
    pub mean_total_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub mode: DecodeMode,
    pub rows: Vec<HorizonRow>,
    pub overall: HorizonRow,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    n: usize,
    se: f64,
    dv: f64,
    kv: f64,
    sd: f64,
}

impl Acc {
    fn row(&self, horizon: usize) -> HorizonRow {
        let n = self.n.max(1) as f64;
        HorizonRow {
            horizon,
            points: self.n,
            rmse: (self.se / n).sqrt(),
            data_std: (self.dv / n).sqrt(),
            knowledge_std: (self.kv / n).sqrt(),
            total_std: ((self.dv + self.kv) / n).sqrt(),
            mean_total_std: self.sd / n,
        }
    }
}

/// Per-horizon RMSE against predicted uncertainty on a held-out set.
pub fn calibration_report(model: &Model, samples: &[&Sample], mode: DecodeMode, batch_size: usize) -> Result<CalibrationReport> {
    let c = collect(model, samples, mode, batch_size)?;
    let (preds, p, t) = (c.preds, c.speed.0, c.speed.1);
    let steps = model.config().decoder_steps;
    let nodes = model.graph().num_nodes();
    let mut acc = vec![Acc::default(); steps];
    let mut idx = 0;
    for pr in &preds {
        for k in 0..steps {
            for i in 0..nodes {
                let j = k * nodes + i;
                let b = pr.breakdown(j)?;
                let a = &mut acc[k];
                a.n += 1;
                a.se += (p[idx] - t[idx]).powi(2);
                a.dv += b.data_var;
                a.kv += b.knowledge_var;
                a.sd += b.total_var.sqrt();
                idx += 1;
            }
        }
    }
    let total = acc.iter().fold(Acc::default(), |s, a| Acc {
        n: s.n + a.n,
        se: s.se + a.se,
        dv: s.dv + a.dv,
        kv: s.kv + a.kv,
        sd: s.sd + a.sd,
    });
    Ok(CalibrationReport {
        mode,
        rows: acc.iter().enumerate().map(|(k, a)| a.row(k + 1)).collect(),
        overall: total.row(0),
    })
}

impl CalibrationReport {
    pub fn to_csv(&self, stamp: &Stamp) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", stamp.csv_comment());
        s.push_str("horizon,points,rmse_kmh,data_std_kmh,knowledge_std_kmh,total_std_kmh,mean_total_std_kmh\n");
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e},{:e}",
                r.horizon, r.points, r.rmse, r.data_std, r.knowledge_std, r.total_std, r.mean_total_std
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_mae_examples() {
        assert_eq!(weighted_mae(&[82.0], &[80.0]).unwrap(), 2.0);
        assert_eq!(weighted_mae(&[52.0], &[50.0]).unwrap(), 8.0);
        assert_eq!(weighted_mae(&[50.0, 90.0], &[50.0, 90.0]).unwrap(), 0.0);
        assert!(weighted_mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(weighted_mae(&[], &[]).is_err());
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let v = [0.0, 0.5, 30.0, 110.0];
        let m = Metrics::from_points(&v, &v, true).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape, m.weighted_mae), (0.0, 0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn mape_skips_near_zero_truth() {
        let m = Metrics::from_points(&[5.0, 110.0], &[0.5, 100.0], false).unwrap();
        assert!((m.mape - 10.0).abs() < 1e-12);
        assert_eq!(m.weighted_mae, None);
    }
}
