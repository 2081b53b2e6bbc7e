use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DoktError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DoktError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("malformed embedding file: {0}")]
    EmbeddingFormat(String),

    #[error("dimension mismatch for {field}: manifest declares {declared}, found {found}")]
    DimensionMismatch {
        field: &'static str,
        declared: u64,
        found: u64,
    },

    #[error("label file: {0}")]
    Labels(String),

    #[error("class {class} out of range for {n_classes} classes")]
    LabelRange { class: usize, n_classes: usize },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token index {index} out of range for {tokens} tokens")]
    TokenIndex { index: usize, tokens: usize },

    #[error("labeled pool is empty")]
    EmptyLabeledPool,

    #[error("need at least {needed} labeled samples, have {have}")]
    NotEnoughLabeled { needed: usize, have: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown sample id {0}")]
    UnknownSample(usize),
}

impl DoktError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DoktError::Io {
            path: path.into(),
            source,
        }
    }
}
