use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[cfg(feature = "model")]
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[cfg(feature = "model")]
    #[error("image decode/encode: {0}")]
    Image(#[from] image::ImageError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error(
        "bitstream was produced by a different model (header {found:016x}, loaded {expected:016x})"
    )]
    ModelMismatch { expected: u64, found: u64 },

    #[error("entropy coder backend {0} is not available in this build")]
    BackendUnavailable(u8),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("training diverged at step {step}; last good checkpoint: {checkpoint:?}")]
    Diverged {
        step: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("{0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    #[cfg(feature = "model")]
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
