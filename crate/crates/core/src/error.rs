use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("layer {layer} already stored with {expected} columns, got {found}")]
    ManifestMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("layer {0} not present in store")]
    MissingLayer(usize),

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("corrupt payload in {path}: expected {expected} bytes, found {found}")]
    CorruptPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("store {0} is locked by another writer")]
    Locked(PathBuf),

    #[error("chunk size {0} is below the minimum of 4 rows")]
    ChunkTooSmall(usize),

    #[error("matrix is not centered")]
    Uncentered,

    #[error("row count mismatch: {0} vs {1}")]
    RowMismatch(usize, usize),

    #[error("HSIC requires n >= 4, got {0}")]
    TooFewRows(usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("batch {batch}: {reason}")]
    Batch { batch: usize, reason: String },

    #[error("invalid distance matrix: {0}")]
    InvalidDistances(String),

    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("invalid tap {tap} for depth {depth}")]
    InvalidTap { tap: usize, depth: usize },

    #[error("width mismatch: expected {expected}, got {found}")]
    WidthMismatch { expected: usize, found: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
