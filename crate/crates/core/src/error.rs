use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("train-mode batch normalization needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("zero-norm vector in cosine similarity ({0})")]
    ZeroNorm(&'static str),
    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("true-class probability is zero for row {row}")]
    ZeroProbability { row: usize },
    #[error("label {label} out of range for {categories} categories")]
    LabelOutOfRange { label: usize, categories: usize },
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing embedding key {0:?}")]
    MissingKey(String),
    #[error("missing embedding keys: {}", .0.join(", "))]
    MissingKeys(alloc::vec::Vec<String>),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("invalid box: {0}")]
    InvalidBox(&'static str),
    #[error("invalid link: {0}")]
    InvalidLink(&'static str),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record")]
    Truncated,
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("non-finite value under key {0:?}")]
    NonFiniteValue(String),
    #[error("key is not valid UTF-8")]
    InvalidUtf8,
    #[error("key of {0} bytes exceeds the 65535-byte limit")]
    KeyTooLong(usize),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}
