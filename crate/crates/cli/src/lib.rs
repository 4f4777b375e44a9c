//! Experiment runner: configuration, pipelines and artifacts for the `impakt` binary.

pub mod config;
pub mod output;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{run, Command, RunOptions};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("health check failed: {0}")]
    Health(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Precondition(_) => 3,
            CliError::Health(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<impakt_core::Error> for CliError {
    fn from(e: impakt_core::Error) -> Self {
        match e {
            impakt_core::Error::Config(_) => CliError::Config(e.to_string()),
            impakt_core::Error::Health(_) => CliError::Health(e.to_string()),
            _ => CliError::Precondition(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
