use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sample {0} has an empty neighborhood")]
    EmptyNeighborhood(usize),

    #[error("voting tensor is zero; no representative orientation")]
    DegenerateTensor,

    #[error("too few normals to build a matrix ({0} rows left)")]
    TooFewNormals(usize),

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("energy increased at step {step}: {before} -> {after}")]
    ConvergenceViolation { step: usize, before: f64, after: f64 },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: no points", .0.display())]
    EmptyFile(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
