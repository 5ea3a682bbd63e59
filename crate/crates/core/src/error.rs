use std::fmt;

use thiserror::Error;

/// A single violated configuration invariant, tagged with the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Divisibility,
    Ordering,
    Range,
    Mismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at `{}`: {}", self.kind, self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CosError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("feature size {size} is not divisible by window size {window}")]
    Divisibility { size: usize, window: usize },

    #[error("invalid configuration: {}", join_violations(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("expected {expected} feature levels, got {got}")]
    LevelMismatch { expected: usize, got: usize },

    #[error("target scale {target_scale} ({queries} queries/window) has no source scale with the same query count")]
    UnmappableScale { target_scale: usize, queries: usize },

    #[error("plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("degenerate observations: {0}")]
    Degenerate(String),

    #[error("batch size must be positive")]
    ZeroBatch,

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("config document: {0}")]
    Document(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T, E = CosError> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(CosError::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}
