use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty support: every combined logit is -inf")]
    EmptySupport,

    #[error("empty cache")]
    EmptyCache,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("page allocator exhausted ({max_pages} pages)")]
    Capacity { max_pages: usize },

    #[error("unknown entry with birth index {birth} in layer {layer}, head {head}")]
    UnknownEntry { layer: usize, head: usize, birth: usize },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("singular design matrix")]
    Singular,

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
