use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the adaptation library.
#[derive(Debug, Error)]
pub enum NrcError {
    #[error("zero-norm vector cannot be normalized")]
    ZeroNorm,

    #[error("non-finite value at position {0}")]
    NonFinite(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("requested {k} neighbors but only {available} candidates exist")]
    TooFewCandidates { k: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dataset has no labels")]
    Unlabeled,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward called without a preceding forward pass")]
    NoForwardCache,

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NrcError>;
