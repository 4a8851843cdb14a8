use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest parse failure: {0}")]
    ManifestParse(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("entry `{name}`: {reason}")]
    Entry { name: String, reason: String },

    #[error("no tensor named `{0}` in manifest")]
    UnknownTensor(String),

    #[error("non-finite value in `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("unknown scale dtype tag {0}")]
    UnknownScaleDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("trailing bytes: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("invalid trit byte at offset {offset} (value {value})")]
    InvalidTritByte { offset: usize, value: u8 },

    #[error("invalid trit value {value} at flat index {index}")]
    InvalidTrit { index: usize, value: i8 },

    #[error("permutation is not a bijection on 0..{0}")]
    BadPermutation(usize),

    #[error("invalid grid parameters: {0}")]
    InvalidGrid(String),

    #[error("gram matrix not symmetric: |C[{i},{j}] - C[{j},{i}]| = {diff:e}")]
    GramNotSymmetric { i: usize, j: usize, diff: f64 },

    #[error("cholesky factorization failed at pivot {pivot}; try a larger damping fraction")]
    Factorization { pivot: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("layer `{0}` has no calibration data and identity-gram fallback is disabled")]
    MissingCalibration(String),

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

    pub(crate) fn entry(name: &str, reason: impl Into<String>) -> Self {
        Error::Entry {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}
