//! Hard-sphere laboratory for the Boltzmann-Grad limit.
//!
//! Exact event-driven dynamics, dual hierarchies with exact jump bookkeeping,
//! pseudo-trajectories, one-sided chaos seminorms and a DSMC reference.

pub mod boltzmann;
pub mod chaos;
pub mod dual;
pub mod dynamics;
pub mod ensembles;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod pseudo;
pub mod rng;
pub mod stats;
pub mod tolerances;
pub mod vecops;

pub use dynamics::{Configuration, FlowOptions, FlowResult};
pub use error::{Error, Result};
