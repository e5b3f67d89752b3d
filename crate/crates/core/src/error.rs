use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("cannot split user {user}: {msg}")]
    Split { user: u32, msg: String },

    #[error("negative sampling for user {user}: {msg}")]
    Sampling { user: u32, msg: String },

    #[error("template placeholder `{placeholder}` has no matching profile attribute")]
    Template { placeholder: String },

    #[error("embedding file: {0}")]
    EmbeddingFormat(String),

    #[error("embeddings missing for users {0:?}")]
    Coverage(Vec<u32>),

    #[error("item id {item} outside [1, {num_items}]")]
    ItemId { item: u32, num_items: usize },

    #[error("training diverged at round {round}, step {step}: {msg}")]
    Training {
        round: usize,
        step: usize,
        msg: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("aggregation: {0}")]
    Aggregation(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
