use std::io;

use thiserror::Error;

use crate::transport::wire::WireError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate key {0:016x} in policy family")]
    DuplicateKey(u64),

    #[error("gradient cache is stale: bundle changed since the forward pass")]
    StaleCache,

    #[error("matrix is not positive definite (pivot {0})")]
    NotPositiveDefinite(usize),

    #[error("matrix is singular")]
    Singular,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("threat model violation: {0}")]
    ThreatModel(String),

    #[error("branch {branch} failed: {reason}")]
    BranchFailed { branch: usize, reason: String },

    #[error(transparent)]
    Wire(#[from] WireError),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
