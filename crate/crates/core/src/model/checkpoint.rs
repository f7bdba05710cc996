//! Binary checkpoints: a JSON header followed by named `f32` tensor blocks.
//!
//! Layout (little-endian): magic `EVTCKPT\0`, format version `u32`, header
//! length `u32`, header JSON, block count `u32`, then per block the name
//! (`u32` length + UTF-8), rank `u32`, dims `u32 × rank` and the values.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::params::{layout, ParamStore};
use super::train::{AdamState, TrainState};
use super::{Model, ModelError, Result};
use crate::artifact::{to_hex, Stamp, VERSION};
use crate::roadgraph::RoadGraph;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EVTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    crate_version: String,
    model: ModelConfig,
    train: TrainConfig,
    graph: String,
    seed: u64,
    config_hash: String,
    iteration: u64,
    epoch: usize,
    adam_t: u64,
}

/// A model plus everything needed to resume training it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub state: TrainState,
    pub stamp: Stamp,
}

fn format_err(msg: impl Into<String>) -> ModelError {
    ModelError::Format(msg.into())
}

fn parse_hash(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 {
        return Err(format_err("config hash must be 64 hex digits"));
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| format_err("config hash is not hex"))?;
    }
    Ok(out)
}

fn write_block(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(t.ndim() as u32)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in t.data() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

fn read_block(r: &mut impl Read) -> Result<(String, Tensor)> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 4096 {
        return Err(format_err("block name too long"));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| format_err("block name is not UTF-8"))?;
    let rank = r.read_u32::<LittleEndian>()? as usize;
    if rank > 8 {
        return Err(format_err(format!("block {name} has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(format_err(format!("block {name} is too large")));
    }
    let mut buf = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut buf)?;
    let t = Tensor::new(shape, buf.into_iter().map(f64::from).collect())?;
    Ok((name, t))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            crate_version: VERSION.to_string(),
            model: self.model.config().clone(),
            train: self.train.clone(),
            graph: self.model.graph().to_text(),
            seed: self.stamp.seed,
            config_hash: to_hex(&self.stamp.config_hash),
            iteration: self.state.iteration,
            epoch: self.state.epoch,
            adam_t: self.state.adam.t,
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        let p = self.model.params();
        w.write_u32::<LittleEndian>(3 * p.len() as u32)?;
        for (prefix, tensors) in [
            ("param", p.tensors()),
            ("adam.m", &self.state.adam.m[..]),
            ("adam.v", &self.state.adam.v[..]),
        ] {
            for (name, t) in p.names().iter().zip(tensors) {
                write_block(w, &format!("{prefix}/{name}"), t)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = r.read_u32::<LittleEndian>()? as usize;
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| format_err(format!("header: {e}")))?;
        let graph = RoadGraph::parse(&header.graph)?;
        let expected = layout(&header.model);
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != 3 * expected.len() {
            return Err(ModelError::Shape(format!(
                "checkpoint has {count} blocks, configuration needs {}",
                3 * expected.len()
            )));
        }
        let mut groups: [Vec<Tensor>; 3] = Default::default();
        for (gi, prefix) in ["param", "adam.m", "adam.v"].iter().enumerate() {
            for (name, shape) in &expected {
                let (got, t) = read_block(r)?;
                let want = format!("{prefix}/{name}");
                if got != want {
                    return Err(ModelError::Shape(format!("expected block {want}, found {got}")));
                }
                if t.shape() != shape.as_slice() {
                    return Err(ModelError::Shape(format!(
                        "block {want} has shape {:?}, configuration needs {shape:?}",
                        t.shape()
                    )));
                }
                groups[gi].push(t);
            }
        }
        let [params, m, v] = groups;
        let names = expected.into_iter().map(|(n, _)| n).collect();
        let model = Model::from_parts(graph, header.model, ParamStore::from_parts(names, params))?;
        header.train.validate()?;
        Ok(Self {
            model,
            train: header.train,
            state: TrainState {
                iteration: header.iteration,
                epoch: header.epoch,
                adam: AdamState { m, v, t: header.adam_t },
            },
            stamp: Stamp {
                seed: header.seed,
                config_hash: parse_hash(&header.config_hash)?,
            },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}
