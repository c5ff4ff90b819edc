use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("record {record}: malformed: {message}")]
    Malformed { record: usize, message: String },

    #[error("record {record}: embedding has dimension {found}, expected {expected}")]
    DimensionMismatch { record: usize, expected: usize, found: usize },

    #[error("record {record}: aspect {aspect:?} is not in the taxonomy")]
    UnknownAspect { record: usize, aspect: String },

    #[error("record {record}: duplicate claim id {id:?}")]
    DuplicateId { record: usize, id: String },

    #[error("record {record}: duplicate label ({aspect}, {action})")]
    DuplicateLabel { record: usize, aspect: String, action: String },

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid fold request: {0}")]
    Folds(String),

    #[error("invalid synthetic spec: {0}")]
    Synthetic(String),

    #[error("anchor {0:?} has no labels")]
    EmptyLabels(String),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("vector norm {0:e} is below the zero-vector guard")]
    NearZero(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found}, expected {expected}")]
    Version { expected: u32, found: u32 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("evaluation: {0}")]
    Eval(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for numerical/runtime failures, 1 for everything
    /// caused by bad input or configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 2,
            _ => 1,
        }
    }
}
