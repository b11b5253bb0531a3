use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Checkpoint decoding failures, each mapped to a stable numeric code.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"DGFD\", found {0:?}")]
    MagicMismatch([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("manifest/payload length disagreement: manifest covers {manifest} bytes, payload has {payload}")]
    LengthMismatch { manifest: usize, payload: usize },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),
}

impl CheckpointError {
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::MagicMismatch(_) => 10,
            CheckpointError::UnsupportedVersion(_) => 11,
            CheckpointError::Truncated { .. } => 12,
            CheckpointError::LengthMismatch { .. } => 13,
            CheckpointError::Integrity(_) => 14,
            CheckpointError::Manifest(_) => 15,
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
