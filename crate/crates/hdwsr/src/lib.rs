//! Command-line harness: run configuration, dataset ingestion, training,
//! sampling, evaluation and debugging dumps around `hdwsr-core`.

pub mod config;
pub mod data;
pub mod debug;
pub mod evaluate;
pub mod session;
pub mod train;

use std::path::PathBuf;

pub use config::RunConfig;
pub use session::Session;

/// Environment variable that switches on deterministic mode.
pub const DETERMINISTIC_ENV: &str = "HDWSR_DETERMINISTIC";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] hdwsr_core::Error),

    #[error("non-finite loss at iteration {iteration}; offending batch written to {}", dump.display())]
    NonFinite { iteration: u64, dump: PathBuf },
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<serde_json::Error> for RunError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

/// Whether deterministic mode is requested through the environment.
pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}
