use thiserror::Error;

/// Errors produced by the equalization lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty stream: {0}")]
    EmptyStream(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// The HMM state space is larger than the configured cap.
    #[error("state space of {states} states exceeds the cap of {cap} states")]
    Capacity { states: u128, cap: usize },

    #[error("numerical failure at step {step}: {what}")]
    Numerical { step: usize, what: &'static str },

    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },

    /// Training produced a non-finite loss. `last_good` holds the parameters
    /// from before the failing step.
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Vec<f64>,
    },

    #[error("channel file: {0}")]
    ChannelFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
