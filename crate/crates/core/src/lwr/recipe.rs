use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{make_corpus, Corpus, ScenarioRun, WINDOW_IN, WINDOW_OUT};
use super::fd::FundamentalDiagram;
use super::network::{simulate, Incident, Inflow, Scenario, TrafficField, DEFAULT_SIM_DT};
use super::{Result, SimError};
use crate::artifact::Stamp;
use crate::roadgraph::RoadGraph;

/// Piecewise-linear boundary demand in veh/h/lane over recorded steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandPattern {
    pub name: String,
    /// `(step, veh/h/lane)` knots, sorted by step.
    pub knots: Vec<(f64, f64)>,
}

impl DemandPattern {
    pub fn constant(name: &str, rate: f64) -> Self {
        Self {
            name: name.into(),
            knots: vec![(0.0, rate)],
        }
    }

    pub fn rate(&self, step: f64) -> f64 {
        let k = &self.knots;
        match k.iter().position(|&(s, _)| s > step) {
            None => k.last().map_or(0.0, |p| p.1),
            Some(0) => k[0].1,
            Some(i) => {
                let (s0, v0) = k[i - 1];
                let (s1, v1) = k[i];
                v0 + (v1 - v0) * (step - s0) / (s1 - s0)
            }
        }
    }

    pub fn profile(&self, horizon: usize) -> Vec<f64> {
        (0..horizon).map(|t| self.rate(t as f64)).collect()
    }
}

/// Incident scenarios derived from one demand pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentPlan {
    pub pattern: usize,
    pub node: usize,
    pub start: usize,
    pub duration: usize,
    pub capacity_drop: f64,
    /// Number of scenarios (with distinct noise) carrying this incident.
    pub count: usize,
}

/// Deterministic recipe for a family of scenarios and the corpus cut from them.
///
/// Every demand pattern is simulated `repeats` times with independent demand
/// noise; incident plans add scenarios on top. Boundary demand enters every
/// node without predecessors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusRecipe {
    pub fd: FundamentalDiagram,
    pub horizon: usize,
    pub warmup_steps: usize,
    pub window_in: usize,
    pub window_out: usize,
    pub stride: usize,
    pub noise_sigma: f64,
    /// Standard deviation of additive Gaussian detector noise on recorded
    /// speeds, km/h. Noisy speeds are clipped to `[0, SPEED_CAP_KMH]`.
    pub speed_noise_kmh: f64,
    pub sim_dt: f64,
    pub patterns: Vec<DemandPattern>,
    pub repeats: usize,
    pub incidents: Vec<IncidentPlan>,
}

impl Default for CorpusRecipe {
    fn default() -> Self {
        Self {
            fd: FundamentalDiagram::default(),
            horizon: 120,
            warmup_steps: 5,
            window_in: WINDOW_IN,
            window_out: WINDOW_OUT,
            stride: 2,
            noise_sigma: 0.1,
            speed_noise_kmh: 3.0,
            sim_dt: DEFAULT_SIM_DT,
            patterns: vec![
                DemandPattern::constant("night", 500.0),
                DemandPattern::constant("off-peak", 900.0),
                DemandPattern {
                    name: "shoulder".into(),
                    knots: vec![(0.0, 900.0), (30.0, 1050.0), (90.0, 1050.0), (110.0, 900.0)],
                },
                DemandPattern {
                    name: "peak".into(),
                    knots: vec![(0.0, 900.0), (30.0, 1400.0), (50.0, 1400.0), (60.0, 800.0)],
                },
            ],
            repeats: 12,
            incidents: vec![IncidentPlan {
                pattern: 1,
                node: 6,
                start: 30,
                duration: 50,
                capacity_drop: 0.6,
                count: 1,
            }],
        }
    }
}

/// Reference corridor: 16 cells of 0.4 km with three lanes, dropping to two
/// lanes from cell 12 onward.
pub fn reference_corridor() -> RoadGraph {
    let lanes: Vec<u32> = (0..16).map(|i| if i < 12 { 3 } else { 2 }).collect();
    RoadGraph::corridor(&lanes, 0.4, 2.0).expect("reference corridor is valid")
}

/// Upper clip for measured speeds, km/h.
pub const SPEED_CAP_KMH: f64 = 130.0;

/// SplitMix64 step; derives independent per-scenario seeds.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CorpusRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed_noise_kmh >= 0.0 && self.speed_noise_kmh.is_finite()) {
            return Err(SimError::Invalid("speed_noise_kmh must be non-negative".into()));
        }
        if self.patterns.is_empty() {
            return Err(SimError::Invalid("recipe has no demand patterns".into()));
        }
        for p in &self.incidents {
            if p.pattern >= self.patterns.len() {
                return Err(SimError::Invalid(format!("incident refers to missing pattern {}", p.pattern)));
            }
        }
        for p in &self.patterns {
            if p.knots.is_empty() || p.knots.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(SimError::Invalid(format!("pattern {} needs increasing knots", p.name)));
            }
        }
        Ok(())
    }

    pub fn scenarios(&self, graph: &RoadGraph, seed: u64) -> Result<Vec<Scenario>> {
        self.validate()?;
        let sources: Vec<usize> = graph
            .predecessors()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_empty())
            .map(|(i, _)| i)
            .collect();
        let base = |pattern: &DemandPattern, idx: u64| {
            let mut sc = Scenario::new(graph.clone());
            sc.fd = self.fd;
            sc.noise_sigma = self.noise_sigma;
            sc.sim_dt = self.sim_dt;
            sc.warmup_steps = self.warmup_steps;
            sc.seed = mix(seed, idx);
            sc.inflows = sources
                .iter()
                .map(|&node| Inflow {
                    node,
                    profile: pattern.profile(self.horizon),
                })
                .collect();
            sc
        };
        let mut out = Vec::new();
        for pattern in &self.patterns {
            for _ in 0..self.repeats {
                out.push(base(pattern, out.len() as u64));
            }
        }
        for plan in &self.incidents {
            for _ in 0..plan.count {
                let mut sc = base(&self.patterns[plan.pattern], out.len() as u64);
                sc.incidents.push(Incident {
                    node: plan.node,
                    start: plan.start,
                    duration: plan.duration,
                    capacity_drop: plan.capacity_drop,
                });
                out.push(sc);
            }
        }
        Ok(out)
    }

    /// Adds detector noise to the recorded speeds of one field.
    fn measure(&self, field: &mut TrafficField, seed: u64) {
        if self.speed_noise_kmh == 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, self.speed_noise_kmh).expect("validated sigma");
        for v in &mut field.speed {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, SPEED_CAP_KMH);
        }
    }

    /// Simulates every scenario and cuts the corpus. The stamp records `seed`
    /// and a hash of the recipe together with the graph.
    pub fn build(&self, graph: &RoadGraph, seed: u64) -> Result<Corpus> {
        let scenarios = self.scenarios(graph, seed)?;
        let fields = scenarios
            .iter()
            .enumerate()
            .map(|(i, sc)| {
                let mut f = simulate(sc, self.horizon)?;
                self.measure(&mut f, mix(!seed, i as u64));
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;
        let runs: Vec<ScenarioRun<'_>> = scenarios
            .iter()
            .zip(&fields)
            .enumerate()
            .map(|(i, (sc, f))| ScenarioRun {
                scenario_id: i as u32,
                field: f,
                incidents: &sc.incidents,
            })
            .collect();
        let samples = make_corpus(&runs, self.window_in, self.window_out, self.stride)?;
        let stamp = Stamp::new(seed, &(self, graph.to_text()));
        Corpus::new(graph.clone(), self.window_in, self.window_out, stamp, samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_linear_rate() {
        let p = DemandPattern {
            name: "x".into(),
            knots: vec![(0.0, 100.0), (10.0, 200.0)],
        };
        assert_eq!(p.rate(-1.0), 100.0);
        assert_eq!(p.rate(5.0), 150.0);
        assert_eq!(p.rate(50.0), 200.0);
    }

    #[test]
    fn small_recipe_builds_deterministically() {
        let recipe = CorpusRecipe {
            horizon: 40,
            repeats: 2,
            incidents: vec![IncidentPlan {
                pattern: 0,
                node: 3,
                start: 20,
                duration: 5,
                capacity_drop: 0.5,
                count: 1,
            }],
            ..Default::default()
        };
        let g = RoadGraph::corridor(&[3, 3, 3, 3, 3, 2, 2, 2], 0.4, 2.0).unwrap();
        let a = recipe.build(&g, 9).unwrap();
        let b = recipe.build(&g, 9).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        // 4 patterns × 2 repeats + 1 incident, 3 windows each
        assert_eq!(a.samples.len(), 27);
        assert_eq!(a.count_rare(), 3);
        assert_ne!(a.to_bytes(), recipe.build(&g, 10).unwrap().to_bytes());
    }
}
