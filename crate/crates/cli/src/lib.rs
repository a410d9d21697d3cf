//! Command-line orchestration of the cotjudge pipeline: label, manipulate,
//! judge, score, replay, fixture.

pub mod config;
pub mod manifest;
pub mod replay;
pub mod stages;

use thiserror::Error;

/// Exit codes: 0 success, 2 config error, 3 partial provider failure,
/// 4 reproducibility mismatch, 1 anything else.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("partial failure: {0}")]
    Partial(String),
    #[error("reproducibility mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Partial(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}
