use std::path::PathBuf;

use thiserror::Error;

use crate::projection::ProjectionMatrix;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("bad magic bytes: expected \"EMB1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("manifest lists {manifest} classes but the embedding header has count {header}")]
    ManifestMismatch { header: usize, manifest: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("column {index} is the zero vector")]
    ZeroColumn { index: usize },

    #[error("text embedding for class {class:?} has zero norm")]
    ZeroTextEmbedding { class: String },

    #[error("projected features collapsed to zero norm at columns {indices:?}")]
    DegenerateFeatures { indices: Vec<usize> },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("component set {0} has no forgetting term (C2)")]
    MissingForgetTerm(String),

    #[error("empty subset: {0}")]
    EmptySubset(String),

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),

    #[error("label {label} at position {position} is out of range for {classes} classes")]
    LabelOutOfRange {
        position: usize,
        label: usize,
        classes: usize,
    },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NotConverged {
        iterations: usize,
        gradient_norm: f64,
        best: Box<ProjectionMatrix>,
    },

    #[error("{}: {cause}", path.display())]
    File {
        path: PathBuf,
        cause: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            cause,
        }
    }
}
