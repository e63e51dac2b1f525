use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate design: need at least 3 distinct epsilon values, got {distinct}")]
    DegenerateDesign { distinct: usize },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("invalid gradient: non-finite component at index {index}")]
    InvalidGradient { index: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("incompatible snapshot: expected {expected} parameters, snapshot has {found}")]
    IncompatibleSnapshot { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("range test diverged immediately at lr {lr}; try a smaller lr_min")]
    Range { lr: f64 },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by the user's configuration rather than by the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
