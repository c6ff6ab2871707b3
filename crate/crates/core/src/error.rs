use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("backward called before forward in {0}")]
    BackwardBeforeForward(&'static str),
    #[error("missing gradient buffer")]
    MissingGrad,
    #[error("gaussian cloud is empty")]
    EmptyCloud,
    #[error("mask is empty")]
    EmptyMask,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("dataset has no frames")]
    EmptySequence,
    #[error("frame {frame}: {message}")]
    FrameDimension { frame: String, message: String },
    #[error("frame {frame}: time {time} does not increase over the previous frame")]
    NonMonotoneTime { frame: String, time: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch")]
    Checksum,
    #[error("unsupported format version {found} (supported up to {supported})")]
    Version { found: u32, supported: u32 },
    #[error("prior provider failed: {0}")]
    Provider(String),
    #[error("training diverged at {stage} iteration {iteration}: {message}")]
    Divergence {
        stage: &'static str,
        iteration: usize,
        message: String,
    },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
