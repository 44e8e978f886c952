//! Learning conditional expectation operators under finite-group symmetry.

pub mod data;
pub mod equivariant;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod group;
pub mod nn;
pub mod rng;

pub use error::{EncpError, Result};
