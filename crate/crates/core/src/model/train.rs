use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::{Model, ModelError, Result};
use crate::artifact::Stamp;
use crate::lwr::Sample;
use crate::tensor::Tensor;

/// Probability of feeding ground truth to a decoder step at `iteration`:
/// `exp(−c · i)`.
pub fn scheduled_sampling_prob(iteration: u64, decay_c: f64) -> f64 {
    (-decay_c * iteration as f64).exp()
}

/// First and second moment estimates of the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            m: params.iter().map(z).collect(),
            v: params.iter().map(z).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// Progress that survives a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Optimiser steps taken so far; drives the sampling schedule.
    pub iteration: u64,
    pub epoch: usize,
    pub adam: AdamState,
}

impl TrainState {
    pub fn fresh(model: &Model) -> Self {
        Self {
            iteration: 0,
            epoch: 0,
            adam: AdamState::zeros_like(model.params().tensors()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Index of the last iteration of the epoch.
    pub iteration: u64,
    /// Teacher-forcing probability used at that iteration.
    pub p: f64,
    pub mean_loss: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self, stamp: &Stamp) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", stamp.csv_comment());
        s.push_str("epoch,iteration,p,mean_loss,batches\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:e},{:e},{}", r.epoch, r.iteration, r.p, r.mean_loss, r.batches);
        }
        s
    }
}

/// Same mixing as the corpus recipe; decorrelates per-epoch streams.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ 0x5851_f42d_4c95_7f2d;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Runs `cfg.epochs` epochs of minibatch Adam on `samples`, continuing from
/// `state` when given. Each epoch shuffles with its own seeded stream, and
/// every batch draws one Bernoulli teacher-forcing decision per decoder step.
/// Parameters are rounded to `f32` at the end so that a saved checkpoint
/// reproduces the in-memory model exactly.
pub fn train(
    model: &mut Model,
    samples: &[&Sample],
    cfg: &TrainConfig,
    seed: u64,
    state: Option<TrainState>,
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(ModelError::Data("training set is empty".into()));
    }
    let mut state = state.unwrap_or_else(|| TrainState::fresh(model));
    let mut log = TrainLog::default();
    let decay = model.config().decay_c;
    let steps = model.config().decoder_steps;
    let first_epoch = state.epoch;
    'epochs: for epoch in first_epoch..first_epoch + cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_iterations.is_some_and(|m| state.iteration >= m) {
                break;
            }
            let p = scheduled_sampling_prob(state.iteration, decay);
            let mask: Vec<bool> = (0..steps).map(|_| rng.gen::<f64>() < p).collect();
            let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let data = model.batch(&batch)?;
            let (loss, mut grads) = model.loss_and_grads(&data, &mask)?;
            if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(ModelError::NonFinite {
                    epoch,
                    batch: bi,
                    iteration: state.iteration,
                });
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            state.adam.step(model.params_mut().tensors_mut(), &grads, cfg);
            loss_sum += loss;
            batches += 1;
            log::debug!("epoch {epoch} batch {bi} loss {loss:.5} p {p:.5}");
            state.iteration += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        let last = state.iteration - 1;
        let rec = EpochRecord {
            epoch,
            iteration: last,
            p: scheduled_sampling_prob(last, decay),
            mean_loss: loss_sum / batches as f64,
            batches,
        };
        log::info!(
            "epoch {} iteration {} loss {:.5} p {:.5}",
            rec.epoch,
            rec.iteration,
            rec.mean_loss,
            rec.p
        );
        log.records.push(rec);
        state.epoch = epoch + 1;
    }
    model.params_mut().round_to_f32();
    for t in state.adam.m.iter_mut().chain(state.adam.v.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
    }
    Ok((state, log))
}
