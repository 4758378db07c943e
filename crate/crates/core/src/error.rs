use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("precision mismatch: expected {expected}, got {actual}")]
    PrecisionMismatch {
        expected: crate::Precision,
        actual: crate::Precision,
    },

    #[error("node {node} ({op}): {source}")]
    Node {
        node: usize,
        op: String,
        #[source]
        source: Box<Error>,
    },

    #[error("graph: {0}")]
    Graph(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }
}
