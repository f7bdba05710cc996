//! One time step of the forecaster, built on a [`Graph`].
//!
//! Tensors are batched as `[batch, nodes, features]`. Speeds and flows are
//! carried normalised by [`SPEED_SCALE`] and [`FLOW_SCALE`]; `β` is in units
//! of the normalised speed squared.

use super::config::{ModelConfig, FLOW_SCALE, SPEED_SCALE};
use super::params::ParamStore;
use super::{ModelError, Result};
use crate::evidential::positivity_transform_graph;
use crate::roadgraph::{NeighborhoodMask, RoadGraph};
use crate::tensor::{Graph, Tensor, Var};

/// Radius of the static graph convolutions inside the recurrent cell.
pub const GRU_DEGREE: usize = 2;
/// Additive logit for pairs outside a receptive field.
const MASKED_LOGIT: f64 = -1e30;
/// Normalised states are clamped to `[ε, 1 − ε]` before the logit skip.
const STATE_EPS: f64 = 1e-3;
/// Scale applied to log-uncertainty input features.
const UNCERTAINTY_FEATURE_SCALE: f64 = 0.1;

/// Constant masks for one dynamic kernel, each `[nodes, nodes]`.
#[derive(Debug, Clone)]
struct KernelMasks {
    degree: usize,
    up: Tensor,
    down: Tensor,
    eye: Tensor,
    outside: Tensor,
}

impl KernelMasks {
    fn new(mask: &NeighborhoodMask) -> Self {
        let n = mask.num_nodes();
        let (up, down, any) = mask.indicator_matrices();
        let outside = any.iter().map(|&a| if a > 0.0 { 0.0 } else { MASKED_LOGIT }).collect();
        let t = |d: Vec<f64>| Tensor::new(vec![n, n], d).expect("square mask");
        Self {
            degree: mask.degree(),
            up: t(up),
            down: t(down),
            eye: Tensor::eye(n),
            outside: t(outside),
        }
    }
}

/// Graph-dependent constants shared by every step.
#[derive(Debug, Clone)]
pub struct Structure {
    nodes: usize,
    speed: KernelMasks,
    flow: KernelMasks,
    a_hat: Tensor,
}

impl Structure {
    pub fn new(graph: &RoadGraph, cfg: &ModelConfig) -> Result<Self> {
        let speed = graph.adjacency_power(cfg.degree_speed)?;
        let flow = graph.adjacency_power(cfg.degree_flow)?;
        let gru = graph.adjacency_power(GRU_DEGREE)?;
        Self::from_masks(&speed, &flow, &gru, cfg)
    }

    /// Builds from precomputed masks; their degrees must match the config.
    pub fn from_masks(
        speed: &NeighborhoodMask,
        flow: &NeighborhoodMask,
        gru: &NeighborhoodMask,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        if speed.degree() != cfg.degree_speed || flow.degree() != cfg.degree_flow {
            return Err(ModelError::Config(format!(
                "mask degrees ({}, {}) do not match configured degrees ({}, {})",
                speed.degree(),
                flow.degree(),
                cfg.degree_speed,
                cfg.degree_flow
            )));
        }
        let n = speed.num_nodes();
        if flow.num_nodes() != n || gru.num_nodes() != n {
            return Err(ModelError::Config("masks cover different node sets".into()));
        }
        Ok(Self {
            nodes: n,
            speed: KernelMasks::new(speed),
            flow: KernelMasks::new(flow),
            a_hat: Tensor::new(vec![n, n], gru.row_normalized()).expect("square mask"),
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn speed_degree(&self) -> usize {
        self.speed.degree
    }

    pub fn flow_degree(&self) -> usize {
        self.flow.degree
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DgcVars {
    pub wq: Var,
    pub wk_up: Var,
    pub wk_down: Var,
    pub wk_self: Var,
    pub wr: Var,
    pub br: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub bz: Var,
    pub wr: Var,
    pub br: Var,
    pub wc: Var,
    pub bc: Var,
}

/// Model parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub speed: DgcVars,
    pub flow: DgcVars,
    pub f_w1: Var,
    pub f_b1: Var,
    pub f_w2: Var,
    pub f_b2: Var,
    pub enc: GruVars,
    pub dec: GruVars,
    pub head_w: Var,
    pub head_b: Var,
    /// Every parameter in store order.
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Registers every parameter as a leaf. With `trainable` false the values
    /// are constants and no gradients are tracked.
    pub fn bind(g: &mut Graph, store: &ParamStore, trainable: bool) -> Result<Self> {
        let all: Vec<Var> = store
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        let get = |name: &str| -> Result<Var> {
            store
                .index_of(name)
                .map(|i| all[i])
                .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
        };
        let dgc = |c: &str| -> Result<DgcVars> {
            Ok(DgcVars {
                wq: get(&format!("dgc.{c}.wq"))?,
                wk_up: get(&format!("dgc.{c}.wk_up"))?,
                wk_down: get(&format!("dgc.{c}.wk_down"))?,
                wk_self: get(&format!("dgc.{c}.wk_self"))?,
                wr: get(&format!("dgc.{c}.wr"))?,
                br: get(&format!("dgc.{c}.br"))?,
            })
        };
        let gru = |c: &str| -> Result<GruVars> {
            Ok(GruVars {
                wz: get(&format!("{c}.wz"))?,
                bz: get(&format!("{c}.bz"))?,
                wr: get(&format!("{c}.wr"))?,
                br: get(&format!("{c}.br"))?,
                wc: get(&format!("{c}.wc"))?,
                bc: get(&format!("{c}.bc"))?,
            })
        };
        Ok(Self {
            speed: dgc("speed")?,
            flow: dgc("flow")?,
            f_w1: get("dgc.f.w1")?,
            f_b1: get("dgc.f.b1")?,
            f_w2: get("dgc.f.w2")?,
            f_b2: get("dgc.f.b2")?,
            enc: gru("enc")?,
            dec: gru("dec")?,
            head_w: get("head.w")?,
            head_b: get("head.b")?,
            all,
        })
    }
}

/// Traffic state entering a step, each `[batch, nodes, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct StepInput {
    /// Speed / [`SPEED_SCALE`].
    pub speed: Var,
    /// Flow / [`FLOW_SCALE`].
    pub flow: Var,
    pub nu: Var,
    pub alpha: Var,
    /// In normalised-speed units squared.
    pub beta: Var,
}

/// Dynamic kernels of one step: `w_*` are `[batch, nodes, nodes]` with
/// `w[b, i, j]` the weight of neighbour `j` for node `i`; `r_*` are the
/// normalised fluctuation terms.
#[derive(Debug, Clone, Copy)]
pub struct DgcKernels {
    pub w_speed: Var,
    pub w_flow: Var,
    pub r_speed: Var,
    pub r_flow: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct DgcOutput {
    /// Normalised speed mean `M'_v`.
    pub speed: Var,
    /// Normalised flow mean `M'_q`.
    pub flow: Var,
    /// Neighbour transform outputs `[batch, nodes, 2]` in `(0, 1)`.
    pub features: Var,
    pub kernels: DgcKernels,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub dgc: DgcOutput,
    /// Updated hidden state `[batch, nodes, hidden]`.
    pub hidden: Var,
    /// Positive NIG parameters for the new speed prediction.
    pub nu: Var,
    pub alpha: Var,
    pub beta: Var,
}

impl StepOutput {
    /// The prediction fed back as the next decoder input.
    pub fn as_input(&self) -> StepInput {
        StepInput {
            speed: self.dgc.speed,
            flow: self.dgc.flow,
            nu: self.nu,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

/// `[batch, nodes, 5]` feature tensor of a step input.
pub fn input_features(g: &mut Graph, s: &StepInput) -> Result<Var> {
    let ln_nu = g.log(s.nu)?;
    let am1 = g.add_scalar(s.alpha, -1.0)?;
    let ln_am1 = g.log(am1)?;
    let ln_beta = g.log(s.beta)?;
    let u = g.concat(&[ln_nu, ln_am1, ln_beta], 2)?;
    let u = g.scale(u, UNCERTAINTY_FEATURE_SCALE)?;
    Ok(g.concat(&[s.speed, s.flow, u], 2)?)
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

fn dynamic_kernel(g: &mut Graph, z: Var, p: &DgcVars, masks: &KernelMasks, key_dim: usize) -> Result<Var> {
    let q = g.matmul(z, p.wq)?;
    let mut logits = None;
    for (wk, mask) in [(p.wk_up, &masks.up), (p.wk_down, &masks.down), (p.wk_self, &masks.eye)] {
        let k = g.matmul(z, wk)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let m = g.constant(mask.clone());
        let s = g.mul(s, m)?;
        logits = Some(match logits {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let logits = g.scale(logits.expect("three terms"), 1.0 / (key_dim as f64).sqrt())?;
    let outside = g.constant(masks.outside.clone());
    let logits = g.add(logits, outside)?;
    Ok(g.softmax(logits, 2)?)
}

/// Dynamic graph convolution: each node's new mean is a convex combination
/// of transformed neighbour states inside its receptive field plus a bounded
/// fluctuation.
pub fn dgc_forward(
    g: &mut Graph,
    st: &Structure,
    vars: &ModelVars,
    cfg: &ModelConfig,
    x: Var,
    hidden: Var,
) -> Result<DgcOutput> {
    if g.shape(x).get(1) != Some(&st.nodes) {
        return Err(ModelError::Shape(format!(
            "input covers {:?} nodes but the structure has {}",
            g.shape(x).get(1),
            st.nodes
        )));
    }
    let z = g.concat(&[x, hidden], 2)?;
    let w_speed = dynamic_kernel(g, z, &vars.speed, &st.speed, cfg.key_dim)?;
    let w_flow = dynamic_kernel(g, z, &vars.flow, &st.flow, cfg.key_dim)?;

    // f(X) = sigmoid(logit([v, q]) + MLP(z)): a learned correction on top of
    // the node's own state, so an untrained transform reproduces its input.
    let state = g.slice(x, 2, 0, 2)?;
    let state = g.clamp(state, STATE_EPS, 1.0 - STATE_EPS)?;
    let ln_p = g.log(state)?;
    let neg = g.neg(state)?;
    let comp = g.add_scalar(neg, 1.0)?;
    let ln_q = g.log(comp)?;
    let skip = g.sub(ln_p, ln_q)?;
    let a = affine(g, z, vars.f_w1, vars.f_b1)?;
    let a = g.tanh(a)?;
    let f = affine(g, a, vars.f_w2, vars.f_b2)?;
    let f = g.add(f, skip)?;
    let f = g.sigmoid(f)?;
    let f_speed = g.slice(f, 2, 0, 1)?;
    let f_flow = g.slice(f, 2, 1, 2)?;

    let mut r = [None, None];
    for (slot, (p, bound)) in r.iter_mut().zip([(&vars.speed, cfg.r_v / SPEED_SCALE), (&vars.flow, cfg.r_q / FLOW_SCALE)]) {
        let lin = affine(g, z, p.wr, p.br)?;
        let t = g.tanh(lin)?;
        *slot = Some(g.scale(t, bound)?);
    }
    let (r_speed, r_flow) = (r[0].expect("set"), r[1].expect("set"));

    let conv_speed = g.matmul(w_speed, f_speed)?;
    let speed = g.add(conv_speed, r_speed)?;
    let conv_flow = g.matmul(w_flow, f_flow)?;
    let flow = g.add(conv_flow, r_flow)?;
    Ok(DgcOutput {
        speed,
        flow,
        features: f,
        kernels: DgcKernels {
            w_speed,
            w_flow,
            r_speed,
            r_flow,
        },
    })
}

/// GRU update whose dense maps act on degree-2 graph-convolved features:
/// `H' = z ⊙ c + (1 − z) ⊙ H`.
pub fn gcgru_step(g: &mut Graph, st: &Structure, p: &GruVars, u: Var, hidden: Var) -> Result<Var> {
    let a_hat = g.constant(st.a_hat.clone());
    let uh = g.concat(&[u, hidden], 2)?;
    let conv = g.matmul(a_hat, uh)?;
    let z = affine(g, conv, p.wz, p.bz)?;
    let z = g.sigmoid(z)?;
    let r = affine(g, conv, p.wr, p.br)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, hidden)?;
    let urh = g.concat(&[u, rh], 2)?;
    let conv_c = g.matmul(a_hat, urh)?;
    let c = affine(g, conv_c, p.wc, p.bc)?;
    let c = g.tanh(c)?;
    let zc = g.mul(z, c)?;
    let neg_z = g.neg(z)?;
    let keep = g.add_scalar(neg_z, 1.0)?;
    let kh = g.mul(keep, hidden)?;
    Ok(g.add(zc, kh)?)
}

/// Node-wise linear map from the hidden state to raw `(ν, α, β)`.
pub fn uncertainty_head(g: &mut Graph, vars: &ModelVars, hidden: Var) -> Result<Var> {
    affine(g, hidden, vars.head_w, vars.head_b)
}

/// One decoder step: dynamic convolution for the new means, recurrent update,
/// then the uncertainty head.
pub fn decoder_step(
    g: &mut Graph,
    st: &Structure,
    vars: &ModelVars,
    cfg: &ModelConfig,
    input: &StepInput,
    hidden: Var,
) -> Result<StepOutput> {
    let x = input_features(g, input)?;
    let dgc = dgc_forward(g, st, vars, cfg, x, hidden)?;
    let u = g.concat(&[x, dgc.speed, dgc.flow], 2)?;
    let h = gcgru_step(g, st, &vars.dec, u, hidden)?;
    let raw = uncertainty_head(g, vars, h)?;
    let r_nu = g.slice(raw, 2, 0, 1)?;
    let r_alpha = g.slice(raw, 2, 1, 2)?;
    let r_beta = g.slice(raw, 2, 2, 3)?;
    let (nu, alpha, beta) = positivity_transform_graph(g, r_nu, r_alpha, r_beta)?;
    Ok(StepOutput {
        dgc,
        hidden: h,
        nu,
        alpha,
        beta,
    })
}

/// Encoder step on an observed input.
pub fn encoder_step(g: &mut Graph, st: &Structure, vars: &ModelVars, input: &StepInput, hidden: Var) -> Result<Var> {
    let x = input_features(g, input)?;
    gcgru_step(g, st, &vars.enc, x, hidden)
}
