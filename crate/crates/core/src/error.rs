use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported version {version} in {path}")]
    BadVersion { path: PathBuf, version: u32 },
    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("invalid mask entry {value} at index {index}")]
    InvalidMask { index: usize, value: u8 },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("not enough samples: {0}")]
    InsufficientSamples(String),
    #[error("unknown sample id {0:?}")]
    UnknownId(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("access violation: {0}")]
    Access(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
