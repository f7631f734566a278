use std::io;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum NestError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("no supervised positions")]
    EmptySupervision,
    #[error("usage error: {0}")]
    Usage(String),
    #[error("gradient oracle error: {0}")]
    Oracle(String),
    #[error("encoding error: token id {id} is outside a vocabulary of {vocab}")]
    Encoding { id: usize, vocab: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("benchmark error: {0}")]
    Benchmark(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, NestError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NestError::Dimension(msg.into()))
}
