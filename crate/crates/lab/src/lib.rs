//! File formats, the experiment runner and plotting for `qac-core`.
//!
//! - [`config`]: `key = value` experiment configurations and their hashes.
//! - [`checkpoint`]: the binary training-state container.
//! - [`tables`]: point tables and trajectory CSVs.
//! - [`results`]: the shared results CSV.
//! - [`runner`]: manifests, `run_experiment` and sweeps.
//! - [`plot`]: SVG plots.
//! - [`edits`]: editing tasks on tiny-shapes images.

pub mod checkpoint;
pub mod config;
pub mod edits;
mod error;
pub mod plot;
pub mod results;
pub mod runner;
pub mod tables;

pub use error::{LabError, Result};
