use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::network::{Incident, TrafficField};
use super::{Result, SimError};
use crate::artifact::Stamp;
use crate::roadgraph::RoadGraph;

const MAGIC: &[u8; 8] = b"EVTCORP\0";
pub const CORPUS_VERSION: u32 = 1;

/// Default observation and prediction window lengths (output steps).
pub const WINDOW_IN: usize = 20;
pub const WINDOW_OUT: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rarity {
    Recurrent,
    RareIncident,
}

/// One observation + target window. Values are stored time-major
/// (`index = step · nodes + node`) over `window_in + window_out` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub scenario_id: u32,
    pub offset: u32,
    pub rarity: Rarity,
    /// km/h
    pub speed: Vec<f32>,
    /// veh/h/lane
    pub flow: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusHeader {
    pub version: u32,
    pub nodes: usize,
    pub window_in: usize,
    pub window_out: usize,
    pub delta_t: f64,
    pub delta_x: f64,
    pub stamp: Stamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub graph: RoadGraph,
    pub samples: Vec<Sample>,
}

/// A simulated field with the identifiers needed to cut it into samples.
pub struct ScenarioRun<'a> {
    pub scenario_id: u32,
    pub field: &'a TrafficField,
    pub incidents: &'a [Incident],
}

/// Cuts sliding windows of `window_in + window_out` steps every `stride`
/// steps. Samples overlapping an incident window are tagged rare.
pub fn make_corpus(runs: &[ScenarioRun<'_>], window_in: usize, window_out: usize, stride: usize) -> Result<Vec<Sample>> {
    if window_in == 0 || window_out == 0 || stride == 0 {
        return Err(SimError::Invalid("window sizes and stride must be positive".into()));
    }
    let span = window_in + window_out;
    let mut samples = Vec::new();
    for run in runs {
        let f = run.field;
        if f.steps < span {
            return Err(SimError::Invalid(format!(
                "horizon shorter than window: {} steps < {span}",
                f.steps
            )));
        }
        let mut offset = 0;
        while offset + span <= f.steps {
            let range = offset * f.nodes..(offset + span) * f.nodes;
            let rare = run.incidents.iter().any(|inc| inc.overlaps(offset, offset + span));
            samples.push(Sample {
                id: samples.len() as u64,
                scenario_id: run.scenario_id,
                offset: offset as u32,
                rarity: if rare { Rarity::RareIncident } else { Rarity::Recurrent },
                speed: f.speed[range.clone()].iter().map(|&v| v as f32).collect(),
                flow: f.flow[range].iter().map(|&v| v as f32).collect(),
            });
            offset += stride;
        }
    }
    Ok(samples)
}

impl Corpus {
    pub fn new(graph: RoadGraph, window_in: usize, window_out: usize, stamp: Stamp, samples: Vec<Sample>) -> Result<Self> {
        let c = Self {
            header: CorpusHeader {
                version: CORPUS_VERSION,
                nodes: graph.num_nodes(),
                window_in,
                window_out,
                delta_t: graph.delta_t(),
                delta_x: graph.delta_x(),
                stamp,
            },
            graph,
            samples,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn span(&self) -> usize {
        self.header.window_in + self.header.window_out
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.span() * self.header.nodes;
        for s in &self.samples {
            if s.speed.len() != len || s.flow.len() != len {
                return Err(SimError::Format(format!("sample {} has the wrong size", s.id)));
            }
        }
        if self.graph.num_nodes() != self.header.nodes {
            return Err(SimError::Format("graph and header disagree on node count".into()));
        }
        Ok(())
    }

    /// Same header and graph with a different sample set.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            header: self.header,
            graph: self.graph.clone(),
            samples,
        }
    }

    pub fn count_rare(&self) -> usize {
        self.samples.iter().filter(|s| s.rarity == Rarity::RareIncident).count()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let h = &self.header;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(h.version)?;
        w.write_u32::<LittleEndian>(h.nodes as u32)?;
        w.write_u32::<LittleEndian>(h.window_in as u32)?;
        w.write_u32::<LittleEndian>(h.window_out as u32)?;
        w.write_f64::<LittleEndian>(h.delta_t)?;
        w.write_f64::<LittleEndian>(h.delta_x)?;
        w.write_u64::<LittleEndian>(h.stamp.seed)?;
        w.write_all(&h.stamp.config_hash)?;
        let graph = self.graph.to_text();
        w.write_u32::<LittleEndian>(graph.len() as u32)?;
        w.write_all(graph.as_bytes())?;
        w.write_u64::<LittleEndian>(self.samples.len() as u64)?;
        for s in &self.samples {
            w.write_u64::<LittleEndian>(s.id)?;
            w.write_u32::<LittleEndian>(s.scenario_id)?;
            w.write_u32::<LittleEndian>(s.offset)?;
            w.write_u8(match s.rarity {
                Rarity::Recurrent => 0,
                Rarity::RareIncident => 1,
            })?;
            for &v in s.speed.iter().chain(&s.flow) {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SimError::Format("not a corpus file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CORPUS_VERSION {
            return Err(SimError::Format(format!(
                "corpus version {version} is not supported (expected {CORPUS_VERSION})"
            )));
        }
        let nodes = r.read_u32::<LittleEndian>()? as usize;
        let window_in = r.read_u32::<LittleEndian>()? as usize;
        let window_out = r.read_u32::<LittleEndian>()? as usize;
        let delta_t = r.read_f64::<LittleEndian>()?;
        let delta_x = r.read_f64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let glen = r.read_u32::<LittleEndian>()? as usize;
        let mut gbytes = vec![0u8; glen];
        r.read_exact(&mut gbytes)?;
        let text = String::from_utf8(gbytes).map_err(|_| SimError::Format("graph section is not UTF-8".into()))?;
        let graph = RoadGraph::parse(&text).map_err(|e| SimError::Format(format!("graph section: {e}")))?;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let len = (window_in + window_out) * nodes;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = r.read_u64::<LittleEndian>()?;
            let scenario_id = r.read_u32::<LittleEndian>()?;
            let offset = r.read_u32::<LittleEndian>()?;
            let rarity = match r.read_u8()? {
                0 => Rarity::Recurrent,
                1 => Rarity::RareIncident,
                t => return Err(SimError::Format(format!("unknown rarity tag {t}"))),
            };
            let mut speed = vec![0f32; len];
            let mut flow = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut speed)?;
            r.read_f32_into::<LittleEndian>(&mut flow)?;
            samples.push(Sample {
                id,
                scenario_id,
                offset,
                rarity,
                speed,
                flow,
            });
        }
        let c = Self {
            header: CorpusHeader {
                version,
                nodes,
                window_in,
                window_out,
                delta_t,
                delta_x,
                stamp: Stamp { seed, config_hash },
            },
            graph,
            samples,
        };
        c.validate()?;
        Ok(c)
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

    /// One row per (sample, node, step) with a leading provenance comment.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.stamp.csv_comment());
        out.push_str("sample_id,scenario_id,offset,rarity,node,step,speed_kmh,flow_veh_h_lane\n");
        let n = self.header.nodes;
        for s in &self.samples {
            let rarity = match s.rarity {
                Rarity::Recurrent => "recurrent",
                Rarity::RareIncident => "rare-incident",
            };
            for node in 0..n {
                for step in 0..self.span() {
                    let k = step * n + node;
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{}",
                        s.id, s.scenario_id, s.offset, rarity, node, step, s.speed[k], s.flow[k]
                    );
                }
            }
        }
        out
    }
}
