//! Training-dynamics lab for parametric vs in-context knowledge on synthetic
//! biographies.

pub mod biogen;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod probes;
pub mod report;
pub mod rng;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
