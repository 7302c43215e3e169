//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Run configuration could not be parsed or is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset file missing, truncated, or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint file missing, wrong magic/version, or malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training or sampling produced non-finite values.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data/checkpoint, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch(_) => 2,
            Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 3,
            Error::Divergence(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
