use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("state error: {0}")]
    State(String),
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },
    #[error("no samples for class(es) {0:?}")]
    MissingClass(Vec<usize>),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
