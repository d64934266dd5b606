use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{kind} not found: {key}")]
    NotFound { kind: &'static str, key: String },

    #[error("missing artifact {path} (run the `{stage}` stage first)")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("label map covers {coverage:.4} of entities, below the required {required:.4}")]
    LabelCoverage { coverage: f64, required: f64 },

    #[error("no prompt survived selection for relation {relation}; supply a manual seed prompt")]
    NoPrompts { relation: String },

    #[error("entity pool too small for {triple}: needed {needed} negatives, found {available}")]
    NegativePool {
        triple: String,
        needed: usize,
        available: usize,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Scorer(#[from] ScorerError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures from a scorer backend. Transport problems are kept apart from
/// scoring failures reported by a live service.
#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("scorer transport failure: {0}")]
    Transport(String),

    #[error("scorer rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },

    #[error("scorer failed ({status}): {message}")]
    Failed { status: u16, message: String },

    #[error("malformed scorer response: {0}")]
    Protocol(String),

    #[error("invalid scoring request: {0}")]
    Request(String),
}
