//! Experiment runner behind the `cumnet` binary: JSON configs, CSV and SVG
//! outputs, and run manifests.

pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use pipeline::{run, RunArtifacts};
