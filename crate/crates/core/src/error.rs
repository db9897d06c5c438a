use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("batch of size {0} is too small for training-mode batch normalization")]
    BatchSize(usize),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid batch composition: {0}")]
    BatchComposition(String),

    #[error("stale or mismatched forward cache: {0}")]
    Usage(String),

    #[error("model state: {0}")]
    State(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
