use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the harvesting pipeline or the solver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {message}")]
    Document { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("duplicate book id `{0}`")]
    DuplicateBook(String),

    #[error("unknown book id `{0}`")]
    UnknownBook(String),

    #[error("tag sequence has length {tags} but book has {elements} elements")]
    LengthMismatch { tags: usize, elements: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimizer diverged (non-finite objective) at regularization {0}")]
    Divergence(f64),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("constraint violation: {0}")]
    Constraint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("grounding would produce more than {cap} instances; reduce the problem size")]
    GroundingCap { cap: usize },

    #[error("model file error: {0}")]
    Model(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
