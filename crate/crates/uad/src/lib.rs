//! Files, training runs, reports and the `uad` command line on top of
//! [`uad_core`].

pub mod cli;
pub mod dataset;
pub mod error;
pub mod report;
pub mod run_manifest;
pub mod scores;
pub mod trainer;
pub mod volume_io;

pub use error::{Error, Result};
pub use uad_core as core;
