use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ku_mean, Result};
use crate::artifact::Stamp;
use crate::lwr::Sample;
use crate::model::{DecodeMode, Model};

/// Acceptance counts for one window of the incoming stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamWindow {
    pub window: usize,
    pub incoming: usize,
    pub malformed: usize,
    pub kept: usize,
    /// kept / well-formed samples in this window.
    pub rate: f64,
    /// kept / well-formed samples so far.
    pub cumulative_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutcome {
    pub kept: Vec<Sample>,
    pub windows: Vec<StreamWindow>,
    pub malformed: usize,
}

impl StreamOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        self.windows.last().map_or(0.0, |w| w.cumulative_rate)
    }

    pub fn log_csv(&self, stamp: &Stamp) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", stamp.csv_comment());
        s.push_str("window,incoming,malformed,kept,rate,cumulative_rate\n");
        for w in &self.windows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:e},{:e}",
                w.window, w.incoming, w.malformed, w.kept, w.rate, w.cumulative_rate
            );
        }
        s
    }
}

fn well_formed(model: &Model, s: &Sample) -> bool {
    let len = model.span() * model.graph().num_nodes();
    s.speed.len() == len && s.flow.len() == len && s.speed.iter().chain(&s.flow).all(|v| v.is_finite())
}

/// Keeps incoming samples whose score exceeds `threshold`, in windows of
/// `window` samples. Malformed samples are skipped and counted.
pub fn stream_filter<I>(model: &Model, threshold: f64, incoming: I, window: usize, mode: DecodeMode) -> Result<StreamOutcome>
where
    I: IntoIterator<Item = Sample>,
{
    let window = window.max(1);
    let mut out = StreamOutcome {
        kept: Vec::new(),
        windows: Vec::new(),
        malformed: 0,
    };
    let (mut seen_ok, mut kept_total) = (0usize, 0usize);
    let mut buf: Vec<Sample> = Vec::with_capacity(window);
    let mut iter = incoming.into_iter().peekable();
    while iter.peek().is_some() {
        buf.clear();
        buf.extend(iter.by_ref().take(window));
        let incoming = buf.len();
        let (good, bad): (Vec<&Sample>, Vec<&Sample>) = buf.iter().partition(|s| well_formed(model, s));
        if !bad.is_empty() {
            log::warn!("window {}: skipped {} malformed samples", out.windows.len(), bad.len());
        }
        let mut kept = 0;
        if !good.is_empty() {
            for (p, s) in model.predict(&good, mode, window)?.iter().zip(&good) {
                if ku_mean(p)? > threshold {
                    out.kept.push((*s).clone());
                    kept += 1;
                }
            }
        }
        seen_ok += good.len();
        kept_total += kept;
        out.malformed += bad.len();
        out.windows.push(StreamWindow {
            window: out.windows.len(),
            incoming,
            malformed: bad.len(),
            kept,
            rate: if good.is_empty() { 0.0 } else { kept as f64 / good.len() as f64 },
            cumulative_rate: if seen_ok == 0 { 0.0 } else { kept_total as f64 / seen_ok as f64 },
        });
    }
    Ok(out)
}
