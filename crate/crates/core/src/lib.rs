//! Sensor self-localisation in multi-sensor linear-Gaussian models.
//!
//! Local single-sensor filtering feeds a node-wise separable (quad-term)
//! pseudo-likelihood, which serves as the edge potential of a pairwise MRF
//! over sensor offsets. Marginals are estimated with nonparametric loopy BP.

pub mod assignment;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod lgss;
pub mod likelihood;
pub mod nbp;
pub mod scenario;
pub mod tracker;

pub use error::{Error, Result};
