//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or unsupported WAV content (bad RIFF structure, truncated chunks).
    #[error("wav format error in {path}: {reason}")]
    WavFormat { path: String, reason: String },

    /// Structurally valid WAV that this frontend does not accept.
    #[error("unsupported wav in {path}: {reason}")]
    WavUnsupported { path: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A numeric degeneracy the math cannot recover from (NaN loss, zero-norm
    /// embedding, rank-0 projection input).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Line-addressed parse failure in a text data file.
    #[error("malformed line {line} in {path}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// EER needs at least one genuine and one spoof score.
    #[error("single-class score set: {0}")]
    SingleClass(&'static str),

    /// The chosen strategy distills from a previous-step model that was not given.
    #[error("strategy {0} requires a teacher model")]
    MissingTeacher(&'static str),

    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = std::result::Result<T, Error>;
