use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("conflicting descriptions for entity `{entity}` ({path}:{line})")]
    DescriptionConflict {
        path: PathBuf,
        line: usize,
        entity: String,
    },

    #[error("empty graph")]
    EmptyGraph,

    #[error("inductive split infeasible: {0}")]
    Infeasible(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("sequence too long: needs {needed} tokens but max_len is {max_len}")]
    Length { needed: usize, max_len: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenIndex { id: u32, vocab: usize },

    #[error("training diverged at epoch {epoch} (last finite loss {last_finite_loss:?})")]
    Divergence {
        epoch: usize,
        last_finite_loss: Option<f64>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown {kind} `{label}`")]
    Lookup { kind: &'static str, label: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
