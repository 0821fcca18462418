use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("cannot normalize a vector of norm {norm:e}")]
    Degenerate { norm: f64 },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset {0} contains no interactions")]
    EmptyDataset(PathBuf),
    #[error("cannot split {users} users into train/valid/test")]
    Split { users: usize },
    #[error("need {wanted} negatives but only {available} candidates remain")]
    Sampling { wanted: usize, available: usize },
    #[error("checkpoint tensor `{tensor}`: {message}")]
    Checkpoint { tensor: String, message: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
