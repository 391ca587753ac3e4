//! Config-driven experiment pipeline: dataset synthesis, probe training,
//! steered generation, ablations and temporal traces.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod manifest;

pub use commands::{run_command, Command};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult, ConfigIssue};
