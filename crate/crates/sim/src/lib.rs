//! Scenario files, run artifacts and the closed-loop runner behind the
//! `drift-sim` command.

use std::path::PathBuf;

pub mod output;
pub mod qpdump;
pub mod runner;
pub mod scenario;

pub use runner::{run_scenario, RunArtifacts, RunOptions};
pub use scenario::Scenario;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Core(#[from] drift_core::Error),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed QP dump: {0}")]
    QpDump(String),
    #[error("malformed run directory: {0}")]
    RunDir(String),
}

impl SimError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SimError {
        let path = path.into();
        move |source| SimError::Io { path, source }
    }
}
