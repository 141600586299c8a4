//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("empty graph: {0}")]
    EmptyGraph(String),

    #[error("node {node} has degree zero; the normalised Laplacian is undefined")]
    IsolatedNode { node: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("eigensolver failed to converge: {0}")]
    Eigensolver(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
