//! Uncertainty-aware network traffic forecasting.
//!
//! The crate bundles a small reverse-mode differentiation engine
//! ([`tensor`]), Normal-Inverse-Gamma evidential losses ([`evidential`]), road
//! graphs with wave-speed-derived receptive fields ([`roadgraph`]), a
//! first-order LWR traffic simulator ([`lwr`]), the graph-recurrent forecaster
//! ([`model`]) and knowledge-uncertainty based dataset distillation
//! ([`distill`]).

pub mod artifact;
pub mod distill;
pub mod evidential;
pub mod lwr;
pub mod model;
pub mod roadgraph;
pub mod tensor;
