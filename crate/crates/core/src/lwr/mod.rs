//! First-order LWR traffic simulation on road graphs.
//!
//! Densities evolve under a triangular fundamental diagram with a Godunov
//! (cell transmission) scheme on a 0.1-minute step and are aggregated to the
//! graph's sampling interval. Scenarios combine boundary demand, lognormal
//! demand noise and capacity-dropping incidents; [`corpus`] cuts simulated
//! fields into observation/target windows.

pub mod corpus;
pub mod fd;
pub mod godunov;
pub mod network;
pub mod recipe;

use thiserror::Error;

pub use corpus::{make_corpus, Corpus, CorpusHeader, Rarity, Sample, ScenarioRun, WINDOW_IN, WINDOW_OUT};
pub use fd::FundamentalDiagram;
pub use godunov::{check_cfl, godunov_step, Boundary};
pub use network::{simulate, total_vehicles, Incident, Inflow, NetworkSolver, Scenario, TrafficField};
pub use recipe::{reference_corridor, CorpusRecipe, DemandPattern, IncidentPlan};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time step {dt} min violates the CFL limit of {limit} min")]
    Cfl { dt: f64, limit: f64 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("corpus format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
