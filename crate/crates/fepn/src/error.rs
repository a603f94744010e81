use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Grid or vector dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input is degenerate (e.g. both class likelihoods underflowed, or a
    /// metric was asked to rank a single-class label set).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Invalid configuration or command-line input.
    #[error("config error: {0}")]
    Config(String),

    /// Optimization produced a non-finite loss.
    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Malformed or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
