use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SpxError>;

#[derive(Debug, Error)]
pub enum SpxError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported size: {0}")]
    UnsupportedSize(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("degenerate reference: {0}")]
    DegenerateReference(String),
    #[error("invalid noise model: {0}")]
    InvalidNoiseModel(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("resource limit: {0}")]
    ResourceLimit(String),
    #[error("degenerate subspace: {0}")]
    DegenerateSubspace(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("split too small: {0}")]
    SplitTooSmall(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> SpxError {
    SpxError::InvalidArgument(msg.into())
}
