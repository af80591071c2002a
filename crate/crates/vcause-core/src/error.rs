use thiserror::Error;

/// Errors surfaced by the library. Verification failures are reported through
/// `bool` or `VerifyReport`, never through this type.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("key {key} is smaller than the current maximum {max}")]
    OutOfOrderKey { key: u128, max: u128 },
    #[error("tree has no leaves")]
    EmptyTree,
    #[error("tree is not finalized")]
    NotFinalized,
    #[error("leaf index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("accumulator has not been committed")]
    NotCommitted,
    #[error("invalid range [{a}, {b}]")]
    InvalidRange { a: u128, b: u128 },
    #[error("timestamp {ts} precedes last recorded timestamp {last}")]
    ClockRegression { ts: u64, last: u64 },
    #[error("root mismatch at epoch {0}")]
    RootMismatch(u64),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("malformed key: {0}")]
    KeyDecode(String),
    #[error("malformed signature: {0}")]
    SignatureDecode(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
