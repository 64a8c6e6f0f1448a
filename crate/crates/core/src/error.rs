use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in component {component} of {context}")]
    NumericalDomain { context: String, component: usize },

    #[error("trajectory diverged at t = {time} (|x| = {norm:e}){}", ic.map(|i| format!(" from initial condition #{i}")).unwrap_or_default())]
    Divergence {
        time: f64,
        norm: f64,
        ic: Option<usize>,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sampling interval too coarse: discrete eigenvalue {re} + {im}i has no principal logarithm")]
    SamplingTooCoarse { re: f64, im: f64 },

    #[error("Koopman matrix is numerically defective: eigenvector condition number {condition:e} exceeds {threshold:e}")]
    Defective { condition: f64, threshold: f64 },

    #[error("eigenvalue pairing failed: {0}")]
    Pairing(String),

    #[error("ill-conditioned eigenbasis: {0}")]
    IllConditioned(String),

    #[error("mode alignment failed; unmatched eigenvalues: {unmatched:?}")]
    Alignment { unmatched: Vec<(f64, f64)> },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: &str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            msg: msg.into(),
        }
    }
}
