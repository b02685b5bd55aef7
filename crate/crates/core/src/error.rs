use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("unknown speaker {0}")]
    UnknownSpeaker(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u16),

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f32 },

    #[error("non-finite loss while perturbing {coordinate}")]
    NonFiniteLoss { coordinate: String },

    #[error("store error: {0}")]
    Store(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable error code used on the wire and in diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimMismatch(_) => "DIM_MISMATCH",
            Error::UnknownSpeaker(_) => "UNKNOWN_SPEAKER",
            Error::BadMagic { .. } => "BAD_MAGIC",
            Error::BadVersion(_) => "BAD_VERSION",
            Error::Truncated { .. } => "TRUNCATED",
            Error::Precondition(_) => "PRECONDITION",
            Error::Divergence { .. } => "DIVERGENCE",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::Store(_) => "STORE_ERROR",
            Error::Io(_) => "IO_ERROR",
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }

    pub(crate) fn pre(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
