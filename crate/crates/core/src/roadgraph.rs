//! Directed road graphs on a uniform segment grid.
//!
//! Each node is a road segment of length `delta_x`; edges point downstream.
//! Receptive fields for graph convolution are directed hop neighbourhoods
//! whose radius is chosen from the information-propagation speed: within one
//! sampling interval a wave travels `c·Δt`, so the neighbourhood must reach past
//! that distance but stay short of `2·c·Δt`.
//!
//! Graph files are plain text:
//!
//! ```text
//! [graph]
//! delta_t_min = 2.0
//!
//! [nodes]
//! id,length_km,lanes
//! a,0.4,3
//! b,0.4,2
//!
//! [edges]
//! from_id,to_id
//! a,b
//! ```

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance used when comparing a receptive-field length against
/// the wave-travel bounds.
const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("degree must be at least 1, got {0}")]
    Degree(usize),
    #[error("wave speed must be positive and finite, got {0}")]
    WaveSpeed(f64),
    #[error(
        "no neighbourhood degree fits the window ({lo:.4} km, {hi:.4} km) with segment length {dx} km; \
         change the segment length or the sampling interval"
    )]
    NoAdmissibleDegree { lo: f64, hi: f64, dx: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub length_km: f64,
    pub lanes: u32,
}

/// Directed road network with a single segment length and sampling interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadGraph {
    nodes: Vec<Segment>,
    edges: Vec<(usize, usize)>,
    delta_x: f64,
    delta_t: f64,
}

/// Whether the closed lower bound `k·Δx ≥ c·Δt` is accepted when choosing a
/// neighbourhood degree. The default excludes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LowerBound {
    #[default]
    Strict,
    Closed,
}

impl RoadGraph {
    /// Validates and builds a graph. `delta_t` is in minutes.
    pub fn new(nodes: Vec<Segment>, edges: Vec<(usize, usize)>, delta_t: f64) -> Result<Self> {
        if nodes.is_empty() {
            return Err(GraphError::Invalid("graph has no nodes".into()));
        }
        if !(delta_t > 0.0 && delta_t.is_finite()) {
            return Err(GraphError::Invalid(format!("delta_t must be positive, got {delta_t}")));
        }
        let delta_x = nodes[0].length_km;
        for n in &nodes {
            if !(n.length_km > 0.0 && n.length_km.is_finite()) {
                return Err(GraphError::Invalid(format!("segment {} has non-positive length", n.id)));
            }
            if (n.length_km - delta_x).abs() > BOUND_TOL * delta_x {
                return Err(GraphError::Invalid(format!(
                    "segment {} has length {} km but the grid uses {} km",
                    n.id, n.length_km, delta_x
                )));
            }
            if n.lanes == 0 {
                return Err(GraphError::Invalid(format!("segment {} has zero lanes", n.id)));
            }
        }
        for &(a, b) in &edges {
            if a >= nodes.len() || b >= nodes.len() {
                return Err(GraphError::Invalid(format!("edge ({a}, {b}) references a missing node")));
            }
            if a == b {
                return Err(GraphError::Invalid(format!("self-loop on {}", nodes[a].id)));
            }
        }
        let g = Self {
            nodes,
            edges,
            delta_x,
            delta_t,
        };
        if !g.weakly_connected() {
            return Err(GraphError::Invalid("graph is not weakly connected".into()));
        }
        Ok(g)
    }

    /// A straight corridor `0 → 1 → … → n−1` with the given lane counts.
    pub fn corridor(lanes: &[u32], delta_x: f64, delta_t: f64) -> Result<Self> {
        let nodes = lanes
            .iter()
            .enumerate()
            .map(|(i, &l)| Segment {
                id: format!("s{i}"),
                length_km: delta_x,
                lanes: l,
            })
            .collect::<Vec<_>>();
        let edges = (1..lanes.len()).map(|i| (i - 1, i)).collect();
        Self::new(nodes, edges, delta_t)
    }

    /// A directed ring `0 → 1 → … → n−1 → 0`.
    pub fn ring(n: usize, lanes: u32, delta_x: f64, delta_t: f64) -> Result<Self> {
        let mut g = Self::corridor(&vec![lanes; n], delta_x, delta_t)?;
        if n > 1 {
            g.edges.push((n - 1, 0));
        }
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Segment] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn lanes(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.lanes).collect()
    }

    /// Segment length in km.
    pub fn delta_x(&self) -> f64 {
        self.delta_x
    }

    /// Sampling interval in minutes.
    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            out[a].push(b);
        }
        out
    }

    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            out[b].push(a);
        }
        out
    }

    /// Same nodes with every edge reversed.
    pub fn reversed(&self) -> Self {
        Self {
            edges: self.edges.iter().map(|&(a, b)| (b, a)).collect(),
            ..self.clone()
        }
    }

    fn weakly_connected(&self) -> bool {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Directed hop neighbourhoods of radius `k`.
    pub fn adjacency_power(&self, k: usize) -> Result<NeighborhoodMask> {
        if k < 1 {
            return Err(GraphError::Degree(k));
        }
        let n = self.nodes.len();
        let succ = self.successors();
        let pred = self.predecessors();
        let mut downstream = vec![false; n * n];
        let mut upstream = vec![false; n * n];
        for i in 0..n {
            for (j, _) in bounded_bfs(&succ, i, k) {
                downstream[i * n + j] = true;
            }
            for (j, _) in bounded_bfs(&pred, i, k) {
                upstream[i * n + j] = true;
            }
        }
        Ok(NeighborhoodMask {
            degree: k,
            n,
            upstream,
            downstream,
        })
    }

    /// Smallest degree `k` with `c·Δt < k·Δx < 2·c·Δt` for wave speed `c`
    /// (km/min). With [`LowerBound::Closed`] the lower bound may be met exactly.
    pub fn select_degree(&self, wave_speed: f64, bound: LowerBound) -> Result<usize> {
        select_degree(wave_speed, self.delta_x, self.delta_t, bound)
    }

    /// Parses the text format described in the module docs.
    pub fn parse(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Graph,
            Nodes,
            Edges,
        }
        let mut section = Section::None;
        let mut header_seen = false;
        let mut delta_t = None;
        let mut nodes: Vec<Segment> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut edge_lines = Vec::new();
        let err = |line: usize, msg: String| GraphError::Parse { line, msg };

        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if s.starts_with('[') {
                section = match s {
                    "[graph]" => Section::Graph,
                    "[nodes]" => Section::Nodes,
                    "[edges]" => Section::Edges,
                    other => return Err(err(line, format!("unknown section {other}"))),
                };
                header_seen = false;
                continue;
            }
            match section {
                Section::None => return Err(err(line, "content outside of a section".into())),
                Section::Graph => {
                    let (key, value) = s
                        .split_once('=')
                        .ok_or_else(|| err(line, format!("expected key = value, got {s:?}")))?;
                    match key.trim() {
                        "delta_t_min" => {
                            let v: f64 = value
                                .trim()
                                .parse()
                                .map_err(|_| err(line, format!("bad delta_t_min {value:?}")))?;
                            delta_t = Some(v);
                        }
                        other => return Err(err(line, format!("unknown key {other}"))),
                    }
                }
                Section::Nodes | Section::Edges if !header_seen => {
                    let expected = if section == Section::Nodes {
                        "id,length_km,lanes"
                    } else {
                        "from_id,to_id"
                    };
                    let got: String = s.chars().filter(|c| !c.is_whitespace()).collect();
                    if got != expected {
                        return Err(err(line, format!("expected header {expected:?}, got {s:?}")));
                    }
                    header_seen = true;
                }
                Section::Nodes => {
                    let cols: Vec<&str> = s.split(',').map(str::trim).collect();
                    if cols.len() != 3 {
                        return Err(err(line, format!("expected 3 columns, got {}", cols.len())));
                    }
                    let length_km: f64 = cols[1]
                        .parse()
                        .map_err(|_| err(line, format!("bad length {:?}", cols[1])))?;
                    let lanes: u32 = cols[2]
                        .parse()
                        .map_err(|_| err(line, format!("bad lane count {:?}", cols[2])))?;
                    if index.insert(cols[0].to_string(), nodes.len()).is_some() {
                        return Err(err(line, format!("duplicate node id {}", cols[0])));
                    }
                    if !(length_km > 0.0) {
                        return Err(err(line, format!("segment length must be positive, got {length_km}")));
                    }
                    if lanes == 0 {
                        return Err(err(line, "lane count must be positive".into()));
                    }
                    if let Some(first) = nodes.first() {
                        if (length_km - first.length_km).abs() > BOUND_TOL * first.length_km {
                            return Err(err(
                                line,
                                format!(
                                    "non-uniform segment length {length_km} km (grid uses {} km)",
                                    first.length_km
                                ),
                            ));
                        }
                    }
                    nodes.push(Segment {
                        id: cols[0].to_string(),
                        length_km,
                        lanes,
                    });
                }
                Section::Edges => {
                    let cols: Vec<&str> = s.split(',').map(str::trim).collect();
                    if cols.len() != 2 {
                        return Err(err(line, format!("expected 2 columns, got {}", cols.len())));
                    }
                    edge_lines.push((line, cols[0].to_string(), cols[1].to_string()));
                }
            }
        }
        for (line, from, to) in edge_lines {
            let a = *index.get(&from).ok_or_else(|| err(line, format!("unknown node {from}")))?;
            let b = *index.get(&to).ok_or_else(|| err(line, format!("unknown node {to}")))?;
            if a == b {
                return Err(err(line, format!("self-loop on {from}")));
            }
            edges.push((a, b));
        }
        let delta_t = delta_t.ok_or_else(|| err(text.lines().count().max(1), "missing delta_t_min in [graph]".into()))?;
        Self::new(nodes, edges, delta_t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[graph]\ndelta_t_min = {}\n\n[nodes]\nid,length_km,lanes", self.delta_t);
        for n in &self.nodes {
            let _ = writeln!(s, "{},{},{}", n.id, n.length_km, n.lanes);
        }
        let _ = writeln!(s, "\n[edges]\nfrom_id,to_id");
        for &(a, b) in &self.edges {
            let _ = writeln!(s, "{},{}", self.nodes[a].id, self.nodes[b].id);
        }
        s
    }
}

/// Breadth-first search limited to `k` hops; yields `(node, hops)` for every
/// node reachable in at most `k` steps (the source itself at zero hops).
fn bounded_bfs(adj: &[Vec<usize>], src: usize, k: usize) -> Vec<(usize, usize)> {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    let mut out = vec![(src, 0)];
    while let Some(u) = queue.pop_front() {
        if dist[u] == k {
            continue;
        }
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                out.push((v, dist[v]));
                queue.push_back(v);
            }
        }
    }
    out
}

/// Degree selection on raw grid parameters; see [`RoadGraph::select_degree`].
pub fn select_degree(wave_speed: f64, delta_x: f64, delta_t: f64, bound: LowerBound) -> Result<usize> {
    if !(wave_speed > 0.0 && wave_speed.is_finite()) {
        return Err(GraphError::WaveSpeed(wave_speed));
    }
    let lo = wave_speed * delta_t;
    let hi = 2.0 * lo;
    let ratio = lo / delta_x;
    // First integer strictly (or, when closed, weakly) above lo/Δx, with
    // values within tolerance of an integer treated as that integer.
    let nearest = ratio.round();
    let on_bound = (ratio - nearest).abs() <= BOUND_TOL * ratio.max(1.0);
    let k = match (on_bound, bound) {
        (true, LowerBound::Strict) => nearest + 1.0,
        (true, LowerBound::Closed) => nearest.max(1.0),
        (false, _) => ratio.ceil().max(1.0),
    };
    let length = k * delta_x;
    if length >= hi * (1.0 - BOUND_TOL) {
        return Err(GraphError::NoAdmissibleDegree { lo, hi, dx: delta_x });
    }
    Ok(k as usize)
}

/// Directed reachability within `degree` hops.
///
/// `downstream(i, j)` holds when a path `i → … → j` of at most `degree` edges
/// exists; `upstream(i, j)` when `j → … → i` does. Both contain the diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodMask {
    degree: usize,
    n: usize,
    upstream: Vec<bool>,
    downstream: Vec<bool>,
}

impl NeighborhoodMask {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn upstream(&self, i: usize, j: usize) -> bool {
        self.upstream[i * self.n + j]
    }

    pub fn downstream(&self, i: usize, j: usize) -> bool {
        self.downstream[i * self.n + j]
    }

    pub fn reachable(&self, i: usize, j: usize) -> bool {
        self.upstream(i, j) || self.downstream(i, j)
    }

    /// `true` when every pair reachable here is also reachable in `other`,
    /// with the same direction label.
    pub fn is_subset_of(&self, other: &NeighborhoodMask) -> bool {
        self.n == other.n
            && self.upstream.iter().zip(&other.upstream).all(|(a, b)| !a || *b)
            && self.downstream.iter().zip(&other.downstream).all(|(a, b)| !a || *b)
    }

    /// Row-major `n×n` 0/1 matrices for strictly-upstream neighbours,
    /// strictly-downstream neighbours, and the union including the diagonal.
    pub fn indicator_matrices(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut up = vec![0.0; n * n];
        let mut down = vec![0.0; n * n];
        let mut any = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                if i != j {
                    up[idx] = f64::from(u8::from(self.upstream[idx]));
                    down[idx] = f64::from(u8::from(self.downstream[idx]));
                }
                any[idx] = f64::from(u8::from(self.reachable(i, j)));
            }
        }
        (up, down, any)
    }

    /// Row-normalised adjacency (self included) for static graph convolution.
    pub fn row_normalized(&self) -> Vec<f64> {
        let (_, _, mut any) = self.indicator_matrices();
        for row in any.chunks_mut(self.n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        any
    }
}
