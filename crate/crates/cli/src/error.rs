//! Harness errors. Pipeline failures carry the name of the stage that
//! halted the run, so a broken sweep variant or CI run is diagnosable from
//! the one-line message alone.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    /// A pipeline stage failed; `stage` is one of the fixed stage names
    /// (gen-data, features, stage1, stage2, eval, report).
    #[error("pipeline halted at stage `{stage}`: {message}")]
    Stage { stage: &'static str, message: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Tag any stage-internal error with the stage name.
pub fn at<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> HarnessError {
    move |e| HarnessError::Stage {
        stage,
        message: e.to_string(),
    }
}
