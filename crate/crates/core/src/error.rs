use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("phoneme token {id} out of vocabulary (V={vocab})")]
    Vocabulary { id: i64, vocab: usize },

    #[error("sampling produced non-finite values at diffusion step {step}")]
    Sampling { step: usize },

    #[error("degenerate point set: {0}")]
    Degenerate(String),

    #[error("training aborted: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
