use thiserror::Error;

/// Errors produced by the gridkal library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("missing data: {0}")]
    Missing(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("non-positive pressure: {0}")]
    NonPositivePressure(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
