//! File formats, training driver, evaluation tables and the `falconx`
//! command line built on `falconx-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod report;
pub mod train;

pub use error::{Error, Result};
