//! Exact simulation and verification tools for rescaled voter-model
//! perturbations and their super-Brownian limits.

pub mod coalescing;
pub mod configuration;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod observables;
pub mod perturbation;
pub mod report;
pub mod rng;
pub mod sbm;
pub mod simulator;
pub mod stats;

pub use configuration::{Configuration, InitialSpec};
pub use error::{Error, Result};
pub use lattice::{KernelSpec, ScalingParams, Site};
pub use perturbation::PerturbationTable;
