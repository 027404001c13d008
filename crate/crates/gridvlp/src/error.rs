//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are inconsistent with the operation's contract.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is invalid before any compute starts.
    #[error("config error: {0}")]
    Config(String),

    /// Token id outside the vocabulary, or a malformed vocabulary file.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Caller broke an operation's stated precondition.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Autoregressive generation exceeded its limits.
    #[error("generation error: {0}")]
    Generation(String),

    /// Non-finite values where finiteness is required.
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    /// Scene placement failed after bounded retries; callers should skip.
    #[error("scene generation gave up after {retries} retries (scene {scene_id})")]
    Placement { scene_id: u64, retries: u32 },

    /// Checkpoint file is malformed or does not match the model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
