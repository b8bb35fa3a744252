//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

use crate::probe::KeyId;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {tensor}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {tensor} at flat offset {offset}")]
    NonFiniteWeight { tensor: String, offset: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("token id {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: u32, vocab_size: usize },

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic tag {0:?}")]
    BadMagic(Vec<u8>),

    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),

    #[error("corrupt directory: {0}")]
    CorruptDirectory(String),

    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),

    #[error("no files matching {filter:?} under {root}")]
    NoFilesFound { root: PathBuf, filter: String },

    #[error("no vocabulary entry or byte fallback for byte 0x{byte:02x} at offset {offset}")]
    UnknownToken { byte: u8, offset: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("empty line")]
    EmptyLine,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("key {key} out of bounds for {n_layers} layers x {d_ff} keys")]
    KeyOutOfBounds {
        key: KeyId,
        n_layers: usize,
        d_ff: usize,
    },

    #[error("incompatible trigger stores: {0}")]
    IncompatibleStores(String),

    #[error("frequency {frequency} outside [1, {t}]")]
    FrequencyOutOfRange { frequency: usize, t: usize },

    #[error("invalid pattern {pattern:?}: {reason}")]
    InvalidPattern { pattern: String, reason: String },

    #[error("no evaluation cases found for concept {0:?}")]
    NoCasesFound(String),

    #[error("found {found} concept-free lines, {requested} requested")]
    InsufficientLines { found: usize, requested: usize },

    #[error("empty evaluation case list")]
    EmptyCases,

    #[error("malformed {what}: {reason}")]
    Malformed { what: String, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            what: what.into(),
            reason: reason.into(),
        }
    }
}
