use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::fd::FundamentalDiagram;
use super::godunov::check_cfl;
use super::{Result, SimError};
use crate::roadgraph::RoadGraph;

/// Internal simulation step in minutes.
pub const DEFAULT_SIM_DT: f64 = 0.1;

/// Boundary demand entering `node`, in veh/h/lane of that node, one value per
/// output interval. The last value holds past the end of the profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inflow {
    pub node: usize,
    pub profile: Vec<f64>,
}

impl Inflow {
    fn rate(&self, step: usize) -> f64 {
        match self.profile.get(step) {
            Some(&v) => v,
            None => self.profile.last().copied().unwrap_or(0.0),
        }
    }
}

/// Capacity reduction at one node over `[start, start + duration)` output steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub node: usize,
    pub start: usize,
    pub duration: usize,
    pub capacity_drop: f64,
}

impl Incident {
    pub fn active(&self, step: usize) -> bool {
        step >= self.start && step < self.start + self.duration
    }

    /// Whether the incident overlaps the half-open step range `[from, to)`.
    pub fn overlaps(&self, from: usize, to: usize) -> bool {
        self.duration > 0 && self.start < to && from < self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub graph: RoadGraph,
    pub fd: FundamentalDiagram,
    pub inflows: Vec<Inflow>,
    pub incidents: Vec<Incident>,
    /// Standard deviation of the mean-one lognormal factor applied to every
    /// boundary inflow at each output step.
    pub noise_sigma: f64,
    pub seed: u64,
    pub sim_dt: f64,
    /// Output steps simulated and discarded before recording starts.
    pub warmup_steps: usize,
    /// Per-lane starting densities; empty road when `None`.
    pub initial_density: Option<Vec<f64>>,
}

impl Scenario {
    pub fn new(graph: RoadGraph) -> Self {
        Self {
            graph,
            fd: FundamentalDiagram::default(),
            inflows: Vec::new(),
            incidents: Vec::new(),
            noise_sigma: 0.0,
            seed: 0,
            sim_dt: DEFAULT_SIM_DT,
            warmup_steps: 0,
            initial_density: None,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<()> {
        self.fd.validate()?;
        let n = self.graph.num_nodes();
        for f in &self.inflows {
            if f.node >= n {
                return Err(SimError::Invalid(format!("inflow at missing node {}", f.node)));
            }
            if f.profile.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(SimError::Invalid(format!("negative or non-finite demand at node {}", f.node)));
            }
        }
        for inc in &self.incidents {
            if inc.node >= n {
                return Err(SimError::Invalid(format!("incident at missing node {}", inc.node)));
            }
            if !(0.0..=1.0).contains(&inc.capacity_drop) {
                return Err(SimError::Invalid(format!(
                    "capacity drop {} outside [0, 1]",
                    inc.capacity_drop
                )));
            }
            if inc.start + inc.duration > horizon {
                return Err(SimError::Invalid(format!(
                    "incident window {}..{} exceeds horizon {horizon}",
                    inc.start,
                    inc.start + inc.duration
                )));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SimError::Invalid("noise_sigma must be non-negative".into()));
        }
        if let Some(init) = &self.initial_density {
            if init.len() != n || init.iter().any(|&r| !(0.0..=self.fd.jam_density).contains(&r)) {
                return Err(SimError::Invalid("initial density has wrong length or range".into()));
            }
        }
        self.substeps()?;
        check_cfl(&self.fd, self.sim_dt, self.graph.delta_x())
    }

    fn substeps(&self) -> Result<usize> {
        let ratio = self.graph.delta_t() / self.sim_dt;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
            return Err(SimError::Invalid(format!(
                "sampling interval {} min is not a multiple of the simulation step {} min",
                self.graph.delta_t(),
                self.sim_dt
            )));
        }
        Ok(k as usize)
    }
}

/// Spatiotemporal state on the output grid, stored time-major
/// (`index = step · nodes + node`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficField {
    pub nodes: usize,
    pub steps: usize,
    /// km/h
    pub speed: Vec<f64>,
    /// veh/h/lane
    pub flow: Vec<f64>,
    /// veh/km/lane
    pub density: Vec<f64>,
}

impl TrafficField {
    pub fn speed_at(&self, step: usize, node: usize) -> f64 {
        self.speed[step * self.nodes + node]
    }

    pub fn flow_at(&self, step: usize, node: usize) -> f64 {
        self.flow[step * self.nodes + node]
    }

    pub fn density_at(&self, step: usize, node: usize) -> f64 {
        self.density[step * self.nodes + node]
    }
}

/// Vehicles on the network for per-lane densities `rho`.
pub fn total_vehicles(graph: &RoadGraph, rho: &[f64]) -> f64 {
    graph
        .nodes()
        .iter()
        .zip(rho)
        .map(|(n, r)| r * f64::from(n.lanes) * n.length_km)
        .sum()
}

/// Network Godunov solver with junction flux splitting.
///
/// Diverges split demand equally over successors (first-in-first-out: the
/// most restrictive successor throttles the whole sender). Merges share a
/// receiver's supply in proportion to the incoming demands. Boundary inflows
/// pass through point queues; cells without successors discharge freely.
pub struct NetworkSolver<'a> {
    scenario: &'a Scenario,
    succ: Vec<Vec<usize>>,
    lanes: Vec<f64>,
    /// Per-lane densities.
    pub rho: Vec<f64>,
    /// Vehicles waiting at each boundary inflow.
    pub queues: Vec<f64>,
}

impl<'a> NetworkSolver<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        let g = &scenario.graph;
        Self {
            scenario,
            succ: g.successors(),
            lanes: g.lanes().into_iter().map(f64::from).collect(),
            rho: scenario
                .initial_density
                .clone()
                .unwrap_or_else(|| vec![0.0; g.num_nodes()]),
            queues: vec![0.0; scenario.inflows.len()],
        }
    }

    /// Advances one internal step with boundary arrival rates `arrivals`
    /// (veh/h, one per inflow) and per-node capacity factors `kappa`.
    /// Returns the per-lane outflow of every cell in veh/h/lane.
    pub fn step(&mut self, arrivals: &[f64], kappa: &[f64]) -> Vec<f64> {
        let sc = self.scenario;
        let fd = &sc.fd;
        let n = self.rho.len();
        let dt_h = sc.sim_dt / 60.0;
        let q = fd.capacity();

        let demand: Vec<f64> = (0..n)
            .map(|i| (fd.free_speed * self.rho[i]).min(kappa[i] * q) * self.lanes[i])
            .collect();
        let supply: Vec<f64> = (0..n).map(|i| fd.supply(self.rho[i]) * self.lanes[i]).collect();

        let mut requested = vec![0.0; n];
        for i in 0..n {
            let m = self.succ[i].len();
            for &j in &self.succ[i] {
                requested[j] += demand[i] / m as f64;
            }
        }
        let src_demand: Vec<f64> = sc
            .inflows
            .iter()
            .zip(arrivals)
            .zip(&self.queues)
            .map(|((_, a), qv)| a + qv / dt_h)
            .collect();
        for (f, d) in sc.inflows.iter().zip(&src_demand) {
            requested[f.node] += d;
        }
        let admit: Vec<f64> = (0..n)
            .map(|j| {
                if requested[j] > supply[j] {
                    supply[j] / requested[j]
                } else {
                    1.0
                }
            })
            .collect();

        let mut inflow = vec![0.0; n];
        let mut outflow = vec![0.0; n];
        for i in 0..n {
            let m = self.succ[i].len();
            let theta = self.succ[i].iter().map(|&j| admit[j]).fold(1.0, f64::min);
            outflow[i] = theta * demand[i];
            for &j in &self.succ[i] {
                inflow[j] += outflow[i] / m as f64;
            }
        }
        for (s, f) in sc.inflows.iter().enumerate() {
            let entered = admit[f.node] * src_demand[s];
            inflow[f.node] += entered;
            self.queues[s] = (self.queues[s] + (arrivals[s] - entered) * dt_h).max(0.0);
        }
        let dx = sc.graph.delta_x();
        for i in 0..n {
            let r = self.rho[i] + dt_h * (inflow[i] - outflow[i]) / (dx * self.lanes[i]);
            self.rho[i] = r.clamp(0.0, fd.jam_density);
        }
        outflow.iter().zip(&self.lanes).map(|(o, l)| o / l).collect()
    }
}

/// Runs a scenario for `horizon` output steps.
pub fn simulate(sc: &Scenario, horizon: usize) -> Result<TrafficField> {
    sc.validate(horizon)?;
    let n = sc.graph.num_nodes();
    let substeps = sc.substeps()?;
    let lanes: Vec<f64> = sc.graph.lanes().into_iter().map(f64::from).collect();
    let mut solver = NetworkSolver::new(sc);
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let sigma = sc.noise_sigma;

    let mut field = TrafficField {
        nodes: n,
        steps: horizon,
        speed: Vec::with_capacity(n * horizon),
        flow: Vec::with_capacity(n * horizon),
        density: Vec::with_capacity(n * horizon),
    };
    let mut kappa = vec![1.0f64; n];
    for step in 0..sc.warmup_steps + horizon {
        let recorded = step.checked_sub(sc.warmup_steps);
        let arrivals: Vec<f64> = sc
            .inflows
            .iter()
            .map(|f| {
                let factor = if sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (sigma * z - 0.5 * sigma * sigma).exp()
                } else {
                    1.0
                };
                f.rate(recorded.unwrap_or(0)) * factor * lanes[f.node]
            })
            .collect();
        kappa.iter_mut().for_each(|k| *k = 1.0);
        if let Some(t) = recorded {
            for inc in sc.incidents.iter().filter(|inc| inc.active(t)) {
                kappa[inc.node] = kappa[inc.node].min(1.0 - inc.capacity_drop);
            }
        }
        let mut acc_rho = vec![0.0; n];
        let mut acc_flow = vec![0.0; n];
        for _ in 0..substeps {
            for (a, r) in acc_rho.iter_mut().zip(&solver.rho) {
                *a += r;
            }
            let out = solver.step(&arrivals, &kappa);
            for (a, o) in acc_flow.iter_mut().zip(out) {
                *a += o;
            }
        }
        if recorded.is_some() {
            let k = substeps as f64;
            for i in 0..n {
                let rho = acc_rho[i] / k;
                let flow = acc_flow[i] / k;
                let speed = if rho > 1e-9 {
                    (flow / rho).min(sc.fd.free_speed)
                } else {
                    sc.fd.free_speed
                };
                field.density.push(rho);
                field.flow.push(flow);
                field.speed.push(speed);
            }
        }
    }
    Ok(field)
}
