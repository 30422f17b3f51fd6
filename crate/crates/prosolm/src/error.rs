//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is invalid (bad cardinality, layer index out of
    /// range, width mismatch between configured modules, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A runtime input violates an operation's contract (shape mismatch,
    /// empty sequence, overlength input, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Quantile binning cannot produce the requested number of bins because
    /// the values do not have enough distinct levels.
    #[error("degenerate bins: {0}")]
    DegenerateBins(String),

    /// Training aborted because the loss became non-finite.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// A serialized artifact is malformed or has an unsupported version.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
