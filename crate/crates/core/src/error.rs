//! Error taxonomy shared across the crate.
//!
//! The CLI maps these onto distinct exit codes: usage/invalid-argument,
//! configuration, and runtime failure classes stay separable.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Caller passed a value outside the operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: expected {expected:?}, got {got:?} ({context})")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },

    /// A run/share/hook configuration is internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values where finite math is required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Toy-model training diverged.
    #[error("training failure at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// DDIM inversion produced a non-finite latent.
    #[error("inversion failure at step {step}: {reason}")]
    Inversion { step: usize, reason: String },

    /// An editing-branch rollout failed mid-loop.
    #[error("rollout failure at step {step}: {reason}")]
    Rollout { step: usize, reason: String },

    /// The guidance loop hit a non-finite loss; the partial loss history is
    /// attached for the run manifest.
    #[error("edit aborted at loop {loop_index}: non-finite total loss")]
    EditAborted {
        loop_index: usize,
        history: Vec<crate::gateway::LossBreakdown>,
    },

    #[error("archive error: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn shape(expected: &[usize], got: &[usize], context: &str) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            got: got.to_vec(),
            context: context.to_string(),
        }
    }
}
