//! Error types shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A row count exceeded what the cache or context window allows.
    #[error("capacity exceeded: {requested} rows requested, limit is {limit}")]
    CapacityExceeded { requested: usize, limit: usize },

    /// A tensor argument did not have the expected element count.
    #[error("dimension mismatch in {context}: expected {expected} elements, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Closed forms require the chunk size to divide the context length evenly.
    #[error("chunk size {chunk} does not divide max context {max_context}")]
    RaggedChunk { chunk: usize, max_context: usize },

    /// Bias mask construction with more valid rows than allocated rows.
    #[error("mask bounds: valid_len {valid_len} exceeds capacity {capacity}")]
    MaskBounds { valid_len: usize, capacity: usize },

    /// Invalid model dimensions, policy parameters, or harness configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Inconsistent speculative staging (unstaged node, bad acceptance path, ...).
    #[error("speculative decoding state error: {0}")]
    SpecDecode(String),

    /// A microbenchmark produced an unusable measurement.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// Non-finite values appeared during a decode iteration.
    #[error("numeric failure at iteration {iteration}")]
    Numeric { iteration: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for usage/config problems, 3 for
    /// numeric failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Numeric { .. } => 3,
            _ => 2,
        }
    }
}
