//! Command-line driver for the lab: config handling, stage orchestration and
//! artifact provenance.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

pub use config::ExperimentConfig;
pub use error::CliError;
