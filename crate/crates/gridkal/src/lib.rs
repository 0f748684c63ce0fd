//! Transient gas pipeline network simulation, structure-preserving model
//! order reduction, and a family of (low-rank) Kalman filters for network
//! state estimation, with a reproducible benchmark harness.

pub mod bench;
pub mod discretization;
pub mod error;
pub mod filters;
pub mod mor;
pub mod network;
pub mod rng;
pub mod simulation;
pub mod sparse;

pub use error::{Error, Result};
