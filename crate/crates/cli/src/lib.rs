//! Experiment runner for the `synadc` converter model.
//!
//! Each experiment turns a [`RunConfig`] into a list of named artifacts
//! (CSV and JSON documents). Artifacts carry the config hash and master seed
//! and no wall-clock data, so reruns are byte-identical.

pub mod config;
pub mod experiments;

use std::path::Path;

pub use config::RunConfig;
pub use experiments::{run_experiment, Artifact, Experiment};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("{0}")]
    Unconvergent(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Precondition(_) => 3,
            CliError::Unconvergent(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<synadc::Error> for CliError {
    fn from(e: synadc::Error) -> Self {
        match e {
            synadc::Error::UnconvergentTrim { .. } => CliError::Unconvergent(e.to_string()),
            other => CliError::Precondition(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Writes artifacts into `dir`, creating it if needed.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    for a in artifacts {
        std::fs::write(dir.join(&a.name), &a.bytes)?;
    }
    Ok(())
}
