use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    Overlength { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenRange { id: u32, vocab: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("frozen weights changed: {0}")]
    FreezeViolation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint payload hash mismatch (expected {expected}, found {found})")]
    HashMismatch { expected: String, found: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 validation, 2 I/O, 3 numeric or contract failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Shape { .. }
            | Error::Invalid(_)
            | Error::Overlength { .. }
            | Error::TokenRange { .. }
            | Error::Config(_)
            | Error::Json(_) => 1,
            Error::NonFinite(_)
            | Error::Diverged { .. }
            | Error::FreezeViolation(_)
            | Error::Checkpoint(_)
            | Error::HashMismatch { .. } => 3,
        }
    }
}
