use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: extents must be >= 1 and rank >= 1")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid gradient: {0}")]
    InvalidGradient(String),

    #[error("unknown configuration {0:?} (expected one of A, A-LRN, B, C, D, E)")]
    InvalidConfig(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("degenerate polygon: {0} vertices (need at least 3)")]
    DegeneratePolygon(usize),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty evaluation: no samples to score")]
    EmptyEvaluation,

    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
