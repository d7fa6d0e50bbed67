use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("evaluation produced a non-finite value: {0}")]
    Evaluation(String),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("length mismatch at `{path}`: expected {expected}, found {found}")]
    Length {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("unknown label `{label}` at `{path}`")]
    Vocabulary { path: String, label: String },

    #[error("invalid segmentation: {0}")]
    Segmentation(String),

    #[error("graph has no rows left after applying {0}")]
    EmptyGraph(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
