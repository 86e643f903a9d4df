//! Learning Hamiltonians from snapshot pairs.

pub mod correction;
pub mod dataset;
pub mod diff_engine;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod field;
pub mod integrators;
pub mod mlp;
pub mod model;
pub mod systems;
pub mod training;

pub use error::{Result, ShnnError};
