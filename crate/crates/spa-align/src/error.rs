//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A scalar input violated its contract (non-finite, out of range).
    #[error("invalid input `{field}`: {reason}")]
    InvalidInput { field: String, reason: String },

    /// A configuration value is outside its documented domain.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or logits dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Text contains a symbol outside the vocabulary.
    #[error("unknown symbol {symbol:?} at position {position}")]
    UnknownSymbol { symbol: char, position: usize },

    /// A token id does not exist in the vocabulary.
    #[error("token id {id} out of vocabulary (size {vocab_size})")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    /// Prompt plus response exceeds the model context.
    #[error("sequence of length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },

    /// A loss or gradient turned non-finite during training.
    #[error("non-finite {what} in tensor `{tensor}` at step {step}")]
    NonFinite {
        tensor: String,
        what: String,
        step: u64,
    },

    /// Checkpoint file is malformed, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A dataset line failed to parse.
    #[error("dataset error at line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    /// A pipeline stage could not make progress.
    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn invalid_input(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors a CLI should report as validation failures (exit 1)
    /// rather than runtime failures (exit 2).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidInput { .. } | Error::Toml(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
