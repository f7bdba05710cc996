use serde::{Deserialize, Serialize};

use super::cell::{decoder_step, encoder_step, ModelVars, StepInput, StepOutput, Structure};
use super::config::{ModelConfig, FLOW_SCALE, SPEED_SCALE};
use super::{ModelError, Result};
use crate::evidential::{total_loss_graph, NigVars};
use crate::lwr::Sample;
use crate::tensor::{Graph, Tensor, Var};

/// Ground truth for a batch of samples, one `[batch, nodes, 1]` tensor per
/// step for normalised speed and flow.
#[derive(Debug, Clone)]
pub struct BatchData {
    pub batch: usize,
    pub nodes: usize,
    pub speed: Vec<Tensor>,
    pub flow: Vec<Tensor>,
}

impl BatchData {
    pub fn new(samples: &[&Sample], nodes: usize, steps: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(ModelError::Data("empty batch".into()));
        }
        let b = samples.len();
        for s in samples {
            if s.speed.len() != steps * nodes || s.flow.len() != steps * nodes {
                return Err(ModelError::Data(format!(
                    "sample {} has {} values, expected {} steps × {} nodes",
                    s.id,
                    s.speed.len(),
                    steps,
                    nodes
                )));
            }
            if s.speed.iter().chain(&s.flow).any(|v| !v.is_finite()) {
                return Err(ModelError::Data(format!("sample {} has missing observations", s.id)));
            }
        }
        let block = |field: fn(&Sample) -> &[f32], scale: f64, t: usize| {
            let mut data = Vec::with_capacity(b * nodes);
            for s in samples {
                data.extend(field(s)[t * nodes..(t + 1) * nodes].iter().map(|&v| f64::from(v) / scale));
            }
            Tensor::new(vec![b, nodes, 1], data).expect("block shape")
        };
        Ok(Self {
            batch: b,
            nodes,
            speed: (0..steps).map(|t| block(|s| &s.speed, SPEED_SCALE, t)).collect(),
            flow: (0..steps).map(|t| block(|s| &s.flow, FLOW_SCALE, t)).collect(),
        })
    }

    pub fn steps(&self) -> usize {
        self.speed.len()
    }
}

/// How decoder inputs are chosen outside of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    /// Feed back the model's own predictions (forecasting).
    #[default]
    FreeRun,
    /// Feed the observed previous step (one-step-ahead predictions).
    TeacherForced,
}

impl DecodeMode {
    pub fn mask(self, steps: usize) -> Vec<bool> {
        vec![self == DecodeMode::TeacherForced; steps]
    }
}

/// Ground-truth step input with the configured input uncertainty.
fn observed(g: &mut Graph, cfg: &ModelConfig, data: &BatchData, t: usize) -> StepInput {
    let (nu, alpha, beta) = cfg.input_nig();
    let shape = [data.batch, data.nodes, 1];
    StepInput {
        speed: g.constant(data.speed[t].clone()),
        flow: g.constant(data.flow[t].clone()),
        nu: g.constant(Tensor::full(&shape, nu)),
        alpha: g.constant(Tensor::full(&shape, alpha)),
        beta: g.constant(Tensor::full(&shape, beta / (SPEED_SCALE * SPEED_SCALE))),
    }
}

/// The previous prediction as the next input, with the means clamped to the
/// physical range (speed in `[0, R_v]`, flow non-negative). The loss itself
/// sees the unclamped means so gradients never vanish at the bounds.
fn feedback(g: &mut Graph, prev: &StepOutput) -> Result<StepInput> {
    let mut input = prev.as_input();
    input.speed = g.clamp(input.speed, 0.0, 1.0)?;
    input.flow = g.clamp(input.flow, 0.0, f64::INFINITY)?;
    Ok(input)
}

/// Encodes the observation window and unrolls the decoder.
///
/// Decoder step 0 always starts from the last observation. For later steps,
/// `teacher_forcing[k]` selects the observed previous target instead of the
/// model's own previous prediction.
pub fn rollout(
    g: &mut Graph,
    st: &Structure,
    vars: &ModelVars,
    cfg: &ModelConfig,
    data: &BatchData,
    teacher_forcing: &[bool],
) -> Result<Vec<StepOutput>> {
    if data.steps() < cfg.encoder_steps + cfg.decoder_steps {
        return Err(ModelError::Data(format!(
            "batch has {} steps, model needs {}",
            data.steps(),
            cfg.encoder_steps + cfg.decoder_steps
        )));
    }
    if data.nodes != st.nodes() {
        return Err(ModelError::Data(format!(
            "batch has {} nodes, model has {}",
            data.nodes,
            st.nodes()
        )));
    }
    if teacher_forcing.len() != cfg.decoder_steps {
        return Err(ModelError::Config(format!(
            "teacher-forcing mask has {} entries, expected {}",
            teacher_forcing.len(),
            cfg.decoder_steps
        )));
    }
    let mut h = g.constant(Tensor::zeros(&[data.batch, data.nodes, cfg.hidden_dim]));
    for t in 0..cfg.encoder_steps {
        let input = observed(g, cfg, data, t);
        h = encoder_step(g, st, vars, &input, h)?;
    }
    let mut input = observed(g, cfg, data, cfg.encoder_steps - 1);
    let mut outputs = Vec::with_capacity(cfg.decoder_steps);
    for (k, &tf) in teacher_forcing.iter().enumerate() {
        if k > 0 {
            input = if tf {
                observed(g, cfg, data, cfg.encoder_steps + k - 1)
            } else {
                feedback(g, outputs.last().expect("previous step"))?
            };
        }
        let out = decoder_step(g, st, vars, cfg, &input, h)?;
        h = out.hidden;
        outputs.push(out);
    }
    Ok(outputs)
}

/// Mean over samples, nodes and decoder steps of the evidential speed loss
/// plus the weighted absolute flow error (both in normalised units).
pub fn sequence_loss(g: &mut Graph, cfg: &ModelConfig, data: &BatchData, outputs: &[StepOutput]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (k, out) in outputs.iter().enumerate() {
        let t = cfg.encoder_steps + k;
        let x = g.constant(data.speed[t].clone());
        let nig = NigVars {
            lambda: out.dgc.speed,
            nu: out.nu,
            alpha: out.alpha,
            beta: out.beta,
        };
        let l = total_loss_graph(g, x, nig, cfg.epsilon, cfg.regularizer)?;
        let mut step = g.sum(l)?;
        if cfg.flow_loss_weight > 0.0 {
            let q = g.constant(data.flow[t].clone());
            let d = g.sub(out.dgc.flow, q)?;
            let a = g.abs(d)?;
            let s = g.sum(a)?;
            let s = g.scale(s, cfg.flow_loss_weight)?;
            step = g.add(step, s)?;
        }
        total = Some(match total {
            None => step,
            Some(acc) => g.add(acc, step)?,
        });
    }
    let count = (data.batch * data.nodes * outputs.len()) as f64;
    let total = total.ok_or_else(|| ModelError::Config("no decoder steps".into()))?;
    Ok(g.scale(total, 1.0 / count)?)
}
