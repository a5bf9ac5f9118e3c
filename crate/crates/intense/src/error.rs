//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the public API.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's contract (shape mismatch, bad label, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A batch operation needs at least two samples.
    #[error("batch too small: need at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    /// A sequence contained a letter outside the configured alphabet.
    #[error("unknown letter {0:?}: alphabet is A, C, G, T")]
    UnknownLetter(char),

    /// A sequence is shorter than the convolution kernel.
    #[error("sequence of length {len} is shorter than kernel width {kernel_width}")]
    SequenceTooShort { len: usize, kernel_width: usize },

    /// Interaction order above the supported maximum.
    #[error("interaction order {order} exceeds the supported maximum {max}")]
    UnsupportedOrder { order: usize, max: usize },

    /// Relevance scores are undefined when every fusion block is zero.
    #[error("relevance undefined: all fusion-head blocks are zero")]
    UndefinedRelevance,

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// An iterative solver did not reach its tolerance.
    #[error("solver failed to converge: {0}")]
    NoConvergence(String),

    /// A numerical oracle failed to produce a trustworthy value.
    #[error("oracle failure: {0}")]
    OracleFailure(String),

    /// Invalid run configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
