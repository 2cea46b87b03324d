//! Simulation and analysis of two-step mutation tunneling in spatial
//! Moran-type populations.

pub mod analytic;
pub mod diffusion;
pub mod lattice;
pub mod oracle;
pub mod replica;
pub mod stats;
pub mod engine;
