use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::evidential::{RegularizerMode, DEFAULT_EPSILON};
use crate::roadgraph::{LowerBound, RoadGraph};

/// Speed normalisation and the fluctuation bound for speed, km/h.
pub const SPEED_SCALE: f64 = 130.0;
/// Flow normalisation and the fluctuation bound for flow, veh/h/lane.
pub const FLOW_SCALE: f64 = 1800.0;

/// Backward (congestion) wave speed used to size the speed receptive field, km/min.
pub const SPEED_WAVE_KM_MIN: f64 = 0.3;
/// Forward (free-flow) wave speed used to size the flow receptive field, km/min.
pub const FLOW_WAVE_KM_MIN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Width of the query/key projections that generate the dynamic kernels.
    pub key_dim: usize,
    /// Hidden width of the shared neighbour transform.
    pub feature_dim: usize,
    pub degree_speed: usize,
    pub degree_flow: usize,
    /// Fluctuation bound for speed, km/h.
    pub r_v: f64,
    /// Fluctuation bound for flow, veh/h/lane.
    pub r_q: f64,
    pub encoder_steps: usize,
    pub decoder_steps: usize,
    pub epsilon: f64,
    pub regularizer: RegularizerMode,
    pub flow_loss_weight: f64,
    pub decay_c: f64,
    /// Total predictive variance, (km/h)², attached to ground-truth inputs.
    pub input_total_variance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            key_dim: 16,
            feature_dim: 32,
            degree_speed: 2,
            degree_flow: 11,
            r_v: SPEED_SCALE,
            r_q: FLOW_SCALE,
            encoder_steps: 20,
            decoder_steps: 15,
            epsilon: DEFAULT_EPSILON,
            regularizer: RegularizerMode::Plain,
            flow_loss_weight: 1.0,
            decay_c: 1.25e-4,
            input_total_variance: 0.4,
        }
    }
}

impl ModelConfig {
    /// Defaults with receptive-field degrees selected from the graph's grid.
    pub fn for_graph(graph: &RoadGraph, bound: LowerBound) -> Result<Self> {
        Ok(Self {
            degree_speed: graph.select_degree(SPEED_WAVE_KM_MIN, bound)?,
            degree_flow: graph.select_degree(FLOW_WAVE_KM_MIN, bound)?,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden_dim == 0 || self.key_dim == 0 || self.feature_dim == 0 {
            return bad("layer widths must be positive");
        }
        if self.degree_speed == 0 || self.degree_flow == 0 {
            return bad("receptive-field degrees must be at least 1");
        }
        if self.encoder_steps == 0 || self.decoder_steps == 0 {
            return bad("encoder and decoder steps must be at least 1");
        }
        if !(self.r_v > 0.0 && self.r_q > 0.0) {
            return bad("fluctuation bounds must be positive");
        }
        if !(self.epsilon >= 0.0 && self.flow_loss_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.decay_c > 0.0) {
            return bad("decay_c must be positive");
        }
        if !(self.input_total_variance > 0.0) {
            return bad("input_total_variance must be positive");
        }
        Ok(())
    }

    /// NIG parameters `(ν, α, β)` attached to ground-truth inputs: `ν = α = 2`
    /// and `β` chosen so that `β(ν+1)/(ν(α−1))` equals the configured variance.
    pub fn input_nig(&self) -> (f64, f64, f64) {
        let (nu, alpha) = (2.0, 2.0);
        let beta = self.input_total_variance * nu * (alpha - 1.0) / (nu + 1.0);
        (nu, alpha, beta)
    }
}

/// Optimiser and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimiser steps in total, if set.
    pub max_iterations: Option<u64>,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 50,
            max_iterations: None,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(ModelError::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}
