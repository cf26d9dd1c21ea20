//! Error type shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data or configuration violates a documented precondition.
    #[error("validation: {0}")]
    Validation(String),

    /// Tensor shape does not match the operation contract.
    #[error("shape: {0}")]
    Shape(String),

    /// Static configuration is inconsistent (head counts, layer sizes, ...).
    #[error("config: {0}")]
    Config(String),

    /// Non-finite values or a diverged optimisation.
    #[error("numeric: {0}")]
    Numeric(String),

    /// A staged command was invoked before its upstream artifact exists.
    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),

    /// Another process holds the output directory lock.
    #[error("output directory is locked: {0}")]
    Locked(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 2 for usage/config/validation, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Config(_) => 2,
            _ => 1,
        }
    }
}
