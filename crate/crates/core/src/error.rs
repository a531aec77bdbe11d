use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gradient error: {0}")]
    Gradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("token {token} outside block {start}..{end}")]
    OutOfBlock {
        token: usize,
        start: usize,
        end: usize,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
