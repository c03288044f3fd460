//! Numerical laboratory for posterior collapse in deep Gaussian VAEs.
//!
//! The crate estimates data covariance spectra, predicts the collapse
//! threshold from the largest eigenvalue, verifies the stability of the
//! collapsed extremum through an explicit second-variation matrix, trains
//! small Gaussian VAEs, and sweeps the control parameter to expose the
//! phase transition in the KL order parameter.

pub mod checkpoint;
pub mod criterion;
pub mod datasets;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod spectrum;
pub mod stability;
pub mod sweep;
pub mod vae;

pub use error::{Error, Result};
