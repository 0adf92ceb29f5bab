use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("state {state} is not reachable from the initial state")]
    Unreachable { state: usize },

    #[error("state {state} cannot reach any final state")]
    NotCoaccessible { state: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("array file: {0}")]
    Array(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid batch: {0}")]
    Batch(String),

    #[error("invalid option: {0}")]
    Options(String),

    #[error("language model: {0}")]
    Lm(String),

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("all {0} utterances failed numerically")]
    AllFailed(usize),

    #[error("{path}: {source}")]
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
}
