use thiserror::Error;

/// Unified error type for the whole laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss became non-finite")]
    Diverged { step: usize, last_good: Box<crate::lm::MicroLM> },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("attack error: {0}")]
    Attack(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("frame {index}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { index: usize, stored: u32, computed: u32 },

    #[error("truncated container at frame {index}: {detail}")]
    Truncated { index: usize, detail: String },

    #[error("protocol handshake failed: {0}")]
    Handshake(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
