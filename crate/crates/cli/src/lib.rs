//! Configuration files, named experiments, run manifests and reports for the
//! `nanbu` command-line tool.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod report;

pub use config::{parse_config, ConfigError, ExperimentSpec, RunConfig};
pub use experiments::{run_experiment, ExperimentName, ExperimentOutcome};
pub use manifest::RunManifest;
