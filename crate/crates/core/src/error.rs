use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad magic: expected MSRG0001")]
    BadMagic,

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("csv: {0}")]
    Csv(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown algorithm: {0}")]
    UnknownAlgorithm(String),

    #[error("missing parameter: {0}")]
    MissingParam(String),

    #[error("missing head for task {0}")]
    MissingHead(usize),

    #[error("missing adapter for task {task}, layer {layer}")]
    MissingAdapter { task: usize, layer: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable short identifier, used by the CLI error line and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::BadMagic => "bad_magic",
            Error::Truncated(_) => "truncated",
            Error::NonFinite(_) => "non_finite",
            Error::MalformedHeader(_) => "malformed_header",
            Error::EmptyDataset => "empty_dataset",
            Error::Csv(_) => "csv",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownAlgorithm(_) => "unknown_algorithm",
            Error::MissingParam(_) => "missing_param",
            Error::MissingHead(_) => "missing_head",
            Error::MissingAdapter { .. } => "missing_adapter",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
