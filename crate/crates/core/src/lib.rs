//! Generalised linear mixed models built from a covariance formula language.
//!
//! The crate parses block designs and model formulae, compiles covariance
//! terms to small stack programs, assembles sparse `Z`, `D` and their
//! Cholesky factors, computes design statistics (approximate marginal
//! covariance, information matrix, power), fits models by Markov chain Monte
//! Carlo maximum likelihood or the Laplace approximation, and searches for
//! c-optimal experimental designs.

pub mod apportion;
pub mod covariance;
pub mod data;
pub mod design;
pub mod error;
pub mod family;
pub mod formula;
pub mod hmc;
pub mod laplace;
pub mod mcml;
pub mod mmio;
pub mod model;
pub mod optim;
pub mod program;
pub mod optdesign;
pub mod sparse;
pub mod special;
pub mod xmatrix;

pub use error::{GlmmError, Result};

/// Engine version recorded in command-line outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
