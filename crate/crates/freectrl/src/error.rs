//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {got:?}, expected {expected}")]
    ShapeMismatch {
        name: String,
        expected: String,
        got: Vec<usize>,
    },

    #[error("tensor `{name}` has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("checkpoint container: {0}")]
    Container(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("sequence of {len} tokens exceeds the model maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("value vector ({layer}, {row}) out of range for {n_layers} layers x {d_ffn} rows")]
    VectorOutOfRange {
        layer: usize,
        row: usize,
        n_layers: usize,
        d_ffn: usize,
    },

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("model fingerprint mismatch: file was built for {expected}, loaded model is {got}")]
    FingerprintMismatch { expected: String, got: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("toxicity scoring disabled: {0}")]
    ToxicityDisabled(String),

    #[error("toxicity service: {0}")]
    ToxicityService(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
