use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("degenerate input to {op}: {reason}")]
    Degenerate { op: &'static str, reason: String },
    #[error("attention query row {row} has no allowed key position")]
    FullyMasked { row: usize },
    #[error("loss is empty: every target position is padding")]
    EmptyLoss,
    #[error("gradient scope selects no parameters")]
    EmptyScope,
    #[error("gradient layout mismatch: {0}")]
    Layout(String),
    #[error("non-finite loss while probing parameter {param}")]
    Probe { param: String },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("language `{0}` already exists")]
    AlreadyExists(String),
    #[error("cannot encode character {ch:?} at position {pos}")]
    Encoding { ch: char, pos: usize },
    #[error("task construction error: {0}")]
    Task(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite validation loss {0}")]
    NonFinite(f64),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
