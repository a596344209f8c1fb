//! Simulation and policy design for a stochastic, controlled
//! Friedkin-Johnsen opinion model with binary acceptance observations.

pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod graph;
pub mod harness;
pub mod policies;
pub mod qpsolve;
pub mod rng;

pub use error::{Error, ErrorClass, Result};
