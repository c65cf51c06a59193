//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {t} outside [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("prompt parse error at {span:?}: {reason}")]
    Parse { span: String, reason: String },

    #[error("prompt tree invalid: {0}")]
    InvalidTree(String),

    #[error("rewrite rejected: {0}")]
    RewriteRejected(String),

    #[error("pool exhausted: {0}")]
    PoolExhausted(String),

    #[error("missing dependency output for step {0}")]
    MissingDependency(String),

    #[error("chain step {step} failed: {source}")]
    ChainStep {
        step: String,
        #[source]
        source: Box<CoreError>,
    },

    #[error("scorer failure: {0}")]
    Scorer(String),

    #[error("judge failure: {0}")]
    Judge(String),

    #[error("remote backend: {0}")]
    Remote(String),

    #[error("gradient non-finite; parameter snapshot written to {0}")]
    NonFiniteGradient(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn non_finite(what: impl Into<String>) -> Self {
        CoreError::NonFinite(what.into())
    }
}
