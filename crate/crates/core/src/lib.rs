//! Numerical core for age-aware unsupervised anomaly detection on 3D volumes.
//!
//! Everything here is pure computation over in-memory data and builds without
//! `std`; file formats, training orchestration and the command line live in
//! the companion `uad` crate. Enable the `std` feature for runtime SIMD
//! dispatch in the matrix kernels.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod phantom;
pub mod scoring;
pub mod seed;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
