use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("image too small: {width}x{height} is below one {cell_size}px cell")]
    ImageTooSmall {
        width: usize,
        height: usize,
        cell_size: usize,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("manifest error at {path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("model file truncated while reading {0}")]
    ModelTruncated(String),

    #[error("model version {found_major}.{found_minor} not supported (expected major {expected_major})")]
    ModelVersion {
        found_major: u32,
        found_minor: u32,
        expected_major: u32,
    },

    #[error("invalid model: {0}")]
    ModelInvalid(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("{0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
