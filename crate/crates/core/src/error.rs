use thiserror::Error;

use crate::transport::DecodeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },

    #[error("local solve diverged at round {round}, client {client}: {detail}")]
    Divergence {
        round: u32,
        client: u32,
        detail: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("seed envelope failed authentication")]
    Authentication,

    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("round {round} aborted: {reason}")]
    RoundAborted { round: u32, reason: String },

    #[error("data format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub fn dims(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            what,
            expected,
            actual,
        }
    }

    /// Process exit status used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => 1,
            Error::Format(_) | Error::Io(_) | Error::OutOfRange { .. } => 2,
            Error::Divergence { .. } => 3,
            Error::Transport(_)
            | Error::RoundAborted { .. }
            | Error::Decode(_)
            | Error::Protocol(_)
            | Error::Authentication => 4,
            Error::Verification(_) => 5,
        }
    }
}

pub(crate) fn ensure_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dims(what, expected, actual))
    }
}
