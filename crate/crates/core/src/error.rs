use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: embedding dimension {found} does not match stream dimension {expected}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: {message}")]
    InvalidRecord { line: usize, message: String },

    #[error("line {line}: duplicate frame_id {frame_id}")]
    DuplicateFrame { line: usize, frame_id: u64 },

    #[error(
        "line {line}: timestamp {timestamp_ms} ms precedes previous timestamp {previous_ms} ms"
    )]
    NonMonotoneTimestamp {
        line: usize,
        timestamp_ms: u64,
        previous_ms: u64,
    },

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("invalid detection: {0}")]
    InvalidDetection(String),

    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),

    #[error("duplicate frame_id {0} in candidate set")]
    DuplicateCandidate(u64),

    #[error("candidate set is at capacity ({0} items)")]
    CapacityExceeded(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incomplete frame: header declares {declared} bytes, {available} available")]
    IncompleteFrame { declared: usize, available: usize },

    #[error("oversize frame: body of {size} bytes exceeds limit of {limit} bytes")]
    OversizeFrame { size: usize, limit: usize },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("server error: {0}")]
    Server(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error(
        "warm-up of {warmup} frames consumed the entire stream ({available} frames available)"
    )]
    WarmupExhausted { warmup: usize, available: usize },

    #[error("stream exhausted after collecting {achieved} candidates; need at least the budget of {budget}")]
    StreamExhausted { achieved: usize, budget: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
