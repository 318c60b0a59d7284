use std::io;

use thiserror::Error;

/// Errors produced anywhere in the recognition pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("vocabulary error: id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("training error on parameter `{param}`: {reason}")]
    Training { param: String, reason: String },

    #[error("empty features: {0}")]
    EmptyFeatures(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("infeasible alignment: {frames} frames cannot emit a target of {labels} labels ({repeats} repeats)")]
    InfeasibleAlignment {
        frames: usize,
        labels: usize,
        repeats: usize,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
