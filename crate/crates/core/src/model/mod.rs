//! Graph-recurrent evidential forecaster.
//!
//! An encoder runs a graph-convolutional GRU over the observation window. Each
//! decoder step then
//!
//! 1. predicts new speed and flow means with a dynamic graph convolution: a
//!    masked softmax over the receptive field (separate key projections for
//!    upstream, downstream and self) weights a shared node-wise transform of
//!    the neighbours, and a `tanh`-bounded fluctuation term is added;
//! 2. updates the hidden state with a second graph-convolutional GRU;
//! 3. maps the new hidden state to `(ν, α, β)` for the speed prediction.
//!
//! Speed is trained with the evidential loss and flow with an absolute error.

pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod params;
pub mod rollout;
pub mod train;

use thiserror::Error;

pub use cell::{DgcKernels, DgcOutput, StepInput, StepOutput, Structure};
pub use checkpoint::Checkpoint;
pub use config::{ModelConfig, TrainConfig, FLOW_SCALE, SPEED_SCALE};
pub use params::ParamStore;
pub use rollout::{BatchData, DecodeMode};
pub use train::{scheduled_sampling_prob, train, AdamState, EpochRecord, TrainLog, TrainState};

use crate::evidential::{decompose, EvidentialError, NigParams, UncertaintyBreakdown};
use crate::lwr::{Corpus, Sample};
use crate::roadgraph::{GraphError, RoadGraph};
use crate::tensor::{Graph, Tensor, TensorError};
use cell::ModelVars;
use rollout::{rollout, sequence_loss};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("non-finite loss or gradient in epoch {epoch}, batch {batch} (iteration {iteration})")]
    NonFinite { epoch: usize, batch: usize, iteration: u64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Evidential(#[from] EvidentialError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Configuration, graph and parameters of a forecaster.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    graph: RoadGraph,
    params: ParamStore,
    structure: Structure,
}

/// Decoder outputs for one sample in physical units, stored step-major
/// (`index = step · nodes + node`).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: u64,
    pub steps: usize,
    pub nodes: usize,
    /// Predicted speed mean `λ` clamped to `[0, 130]` km/h.
    pub speed: Vec<f64>,
    /// Predicted flow, veh/h/lane, clamped at zero.
    pub flow: Vec<f64>,
    pub nu: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `β` in (km/h)².
    pub beta: Vec<f64>,
}

impl Prediction {
    pub fn nig(&self, idx: usize) -> NigParams {
        NigParams {
            lambda: self.speed[idx],
            nu: self.nu[idx],
            alpha: self.alpha[idx],
            beta: self.beta[idx],
        }
    }

    pub fn breakdown(&self, idx: usize) -> Result<UncertaintyBreakdown> {
        Ok(decompose(&self.nig(idx))?)
    }
}

impl Model {
    pub fn new(graph: RoadGraph, config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed);
        Self::from_parts(graph, config, params)
    }

    /// Validates that `params` has exactly the layout the configuration needs.
    pub fn from_parts(graph: RoadGraph, config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = params::layout(&config);
        if expected.len() != params.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameter blocks, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (n, t)) in expected.iter().zip(params.names().iter().zip(params.tensors())) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Shape(format!(
                    "parameter {n} has shape {:?}; expected {name} with shape {shape:?}",
                    t.shape()
                )));
            }
        }
        let structure = Structure::new(&graph, &config)?;
        Ok(Self {
            config,
            graph,
            params,
            structure,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &RoadGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    /// Steps per sample the model consumes.
    pub fn span(&self) -> usize {
        self.config.encoder_steps + self.config.decoder_steps
    }

    /// Rejects corpora whose graph size or windows differ from the model's.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let h = &corpus.header;
        if h.nodes != self.graph.num_nodes() {
            return Err(ModelError::Data(format!(
                "corpus has {} nodes but the model was built for {}",
                h.nodes,
                self.graph.num_nodes()
            )));
        }
        if h.window_in != self.config.encoder_steps || h.window_out != self.config.decoder_steps {
            return Err(ModelError::Data(format!(
                "corpus windows {}+{} do not match the model's {}+{}",
                h.window_in, h.window_out, self.config.encoder_steps, self.config.decoder_steps
            )));
        }
        Ok(())
    }

    pub fn batch(&self, samples: &[&Sample]) -> Result<BatchData> {
        BatchData::new(samples, self.graph.num_nodes(), self.span())
    }

    /// Loss and parameter gradients (store order) for one batch.
    pub fn loss_and_grads(&self, data: &BatchData, teacher_forcing: &[bool]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.params, true)?;
        let outputs = rollout(&mut g, &self.structure, &vars, &self.config, data, teacher_forcing)?;
        let loss = sequence_loss(&mut g, &self.config, data, &outputs)?;
        let value = g.value(loss).item().expect("scalar loss");
        let mut grads = g.backward(loss)?;
        let grads = vars
            .all
            .iter()
            .zip(self.params.tensors())
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Loss without gradients.
    pub fn loss(&self, data: &BatchData, teacher_forcing: &[bool]) -> Result<f64> {
        let mut g = Graph::new();
        let vars = ModelVars::bind(&mut g, &self.params, false)?;
        let outputs = rollout(&mut g, &self.structure, &vars, &self.config, data, teacher_forcing)?;
        let loss = sequence_loss(&mut g, &self.config, data, &outputs)?;
        Ok(g.value(loss).item().expect("scalar loss"))
    }

    /// Forecasts for every sample, processed in batches of `batch_size`.
    pub fn predict(&self, samples: &[&Sample], mode: DecodeMode, batch_size: usize) -> Result<Vec<Prediction>> {
        let mask = mode.mask(self.config.decoder_steps);
        let n = self.graph.num_nodes();
        let steps = self.config.decoder_steps;
        let speed2 = SPEED_SCALE * SPEED_SCALE;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size.max(1)) {
            let data = self.batch(chunk)?;
            let mut g = Graph::new();
            let vars = ModelVars::bind(&mut g, &self.params, false)?;
            let outputs = rollout(&mut g, &self.structure, &vars, &self.config, &data, &mask)?;
            for (b, s) in chunk.iter().enumerate() {
                let mut p = Prediction {
                    sample_id: s.id,
                    steps,
                    nodes: n,
                    speed: Vec::with_capacity(steps * n),
                    flow: Vec::with_capacity(steps * n),
                    nu: Vec::with_capacity(steps * n),
                    alpha: Vec::with_capacity(steps * n),
                    beta: Vec::with_capacity(steps * n),
                };
                for o in &outputs {
                    let row = |v| g.value(v).data()[b * n..(b + 1) * n].to_vec();
                    p.speed.extend(row(o.dgc.speed).into_iter().map(|v| v.clamp(0.0, 1.0) * SPEED_SCALE));
                    p.flow.extend(row(o.dgc.flow).into_iter().map(|v| v.max(0.0) * FLOW_SCALE));
                    p.nu.extend(row(o.nu));
                    p.alpha.extend(row(o.alpha));
                    p.beta.extend(row(o.beta).into_iter().map(|v| v * speed2));
                }
                out.push(p);
            }
        }
        Ok(out)
    }
}
