//! Nested Karlin occupancy scheme: simulation, exact finite-time moments,
//! limit covariances and Monte Carlo verification of the functional limit theorems.

pub mod cli;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod kernels;
pub mod limits;
pub mod moments;
pub mod quad;
pub mod scheme;
pub mod weights;

pub use error::{Error, Result};
