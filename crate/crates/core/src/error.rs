use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed line: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{0}: no records")]
    EmptyFile(PathBuf),
    #[error("nothing survives {k}-core filtering")]
    EmptyAfterFilter { k: usize },
    #[error("item {0:?} is not in the vocabulary")]
    UnknownItem(String),
    #[error("sequence of user {user} has {len} items, need at least {min}")]
    SequenceTooShort { user: usize, len: usize, min: usize },
    #[error("index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("attention mask row {row} has no attendable key")]
    MaskAllFalseRow { row: usize },
    #[error("sequence has no real positions")]
    NoRealPositions,
    #[error("segment prediction needs at least 4 real items, got {0}")]
    SequenceTooShortForSegment(usize),
    #[error("cannot draw {requested} samples from {available} eligible ids")]
    VocabExhausted { requested: usize, available: usize },
    #[error("no donor sequence with at least {0} items")]
    NoEligibleDonor(usize),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("loss diverged at epoch {epoch}: {value}")]
    DivergenceDetected { epoch: usize, value: f64 },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
