//! Absorbing-state discrete diffusion over heterogeneous structured entities.
//!
//! Entities are trees of typed properties (numerical, categorical, text). A
//! transformer over property encodings is trained to reconstruct randomly
//! masked properties with a likelihood-bound weighting, and the reverse
//! process de-masks properties in random order for synthesis and imputation.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod schema;
pub mod training;

pub use error::{Error, Result};
