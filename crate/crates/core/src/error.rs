use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("row {row} has L2 norm {norm}, expected 1 within {tolerance}")]
    NotUnitNorm { row: usize, norm: f64, tolerance: f64 },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("mask selects no rows")]
    EmptyMask,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("bad magic at offset {offset}: expected \"ZTEB\", found {found:?}")]
    BadMagic { offset: usize, found: [u8; 4] },

    #[error("unsupported version {found} at offset {offset} (expected 1)")]
    UnsupportedVersion { offset: usize, found: u16 },

    #[error("unsupported dtype tag {found} at offset {offset} (expected 1 = f32)")]
    UnsupportedDtype { offset: usize, found: u8 },

    #[error("unsupported rank {found} at offset {offset}")]
    UnsupportedRank { offset: usize, found: u8 },

    #[error("truncated header: need {expected} bytes, have {actual}")]
    TruncatedHeader { expected: usize, actual: usize },

    #[error("truncated payload at offset {offset}: need {expected} bytes, have {actual}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("{extra} trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
