use std::io;

use thiserror::Error;

use crate::nifti::NiftiError;
use crate::unet::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("network is frozen and rejects weight updates")]
    Frozen,

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("nifti: {0}")]
    Nifti(#[from] NiftiError),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    NonFiniteLoss { epoch: usize },

    #[error("data: {0}")]
    Data(String),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
