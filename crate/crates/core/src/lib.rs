//! Linearized finite-volume solvers for Keller-Segel type chemotaxis models,
//! with a single-layer network that predicts the nonlinear couplings.

pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod integrate;
pub mod linsolve;
pub mod mesh;
pub mod scheme;
pub mod slnn;

pub use error::{KsError, Result};
pub use harness::{Experiment, ExperimentName};
pub use integrate::{run, RunOptions, RunSummary, StepperKind};
pub use mesh::{Field, Mesh, Quantity, Rect};
pub use scheme::{ModelSpec, Variant};
pub use slnn::{NetworkState, TrainConfig};
