use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty softmax row {row}")]
    EmptySoftmaxRow { row: usize },

    #[error("uncovered query row {row}")]
    UncoveredRow { row: usize },

    #[error("row {row} of attention matrix sums to {sum} (expected 1 over the causal prefix)")]
    InvalidAttentionRow { row: usize, sum: f64 },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("covariance decomposition failed: {0}")]
    Decomposition(String),

    #[error("invalid index set: {0}")]
    IndexSet(String),

    #[error("{0}")]
    Format(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
