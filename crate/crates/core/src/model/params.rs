use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::tensor::Tensor;

/// Per-node input features: normalised speed, normalised flow and three
/// log-uncertainty features.
pub const INPUT_FEATURES: usize = 5;
/// Decoder GRU input: the step features plus the two new means.
pub const DECODER_FEATURES: usize = INPUT_FEATURES + 2;

/// Initial raw head bias for `β`; with normalised speed this gives a
/// predictive standard deviation of a few km/h.
const HEAD_BETA_BIAS: f64 = -6.0;

/// Named, ordered model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Expected parameter names and shapes for a configuration.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_dim;
    let k = cfg.key_dim;
    let m = cfg.feature_dim;
    let z = INPUT_FEATURES + h;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    for c in ["speed", "flow"] {
        for w in ["wq", "wk_up", "wk_down", "wk_self"] {
            push(format!("dgc.{c}.{w}"), vec![z, k]);
        }
        push(format!("dgc.{c}.wr"), vec![z, 1]);
        push(format!("dgc.{c}.br"), vec![1]);
    }
    push("dgc.f.w1".into(), vec![z, m]);
    push("dgc.f.b1".into(), vec![m]);
    push("dgc.f.w2".into(), vec![m, 2]);
    push("dgc.f.b2".into(), vec![2]);
    for (cell, input) in [("enc", INPUT_FEATURES), ("dec", DECODER_FEATURES)] {
        for gate in ["z", "r", "c"] {
            push(format!("{cell}.w{gate}"), vec![input + h, h]);
            push(format!("{cell}.b{gate}"), vec![h]);
        }
    }
    push("head.w".into(), vec![h, 3]);
    push("head.b".into(), vec![3]);
    out
}

impl ParamStore {
    /// Glorot-uniform weights and zero biases, except the head's `β` bias.
    /// The fluctuation weights and the output layer of the neighbour
    /// transform start at zero, so an untrained step predicts a convex
    /// combination of the neighbours' current states.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in layout(cfg) {
            let zero = (name.starts_with("dgc.") && name.ends_with(".wr")) || name == "dgc.f.w2";
            let t = if shape.len() == 2 && !zero {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-limit..limit)).collect();
                Tensor::new(shape, data).expect("shape matches data")
            } else {
                let mut b = Tensor::zeros(&shape);
                if name == "head.b" {
                    b.data_mut()[2] = HEAD_BETA_BIAS;
                }
                b
            };
            names.push(name);
            tensors.push(t);
        }
        Self { names, tensors }
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        assert_eq!(names.len(), tensors.len());
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Rounds every value through `f32`, the precision of checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}
