use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum StmError {
    /// Tensor/layer extent disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Invalid distribution parameters (non-positive sigma, broken simplex, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),
    /// API misuse (step after done, finalize twice, empty input, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed or truncated binary container.
    #[error("container format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StmError>;
