//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("timestep ordering violated: {0}")]
    Ordering(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("wrong prompt kind: {0}")]
    PromptKind(String),
    #[error("taps do not cover layer {0}")]
    Coverage(usize),
    #[error("unmapped multi-word label {0:?}; add it to the label map")]
    Mapping(String),
    #[error("invalid template {template:?}: {reason}")]
    Template { template: String, reason: String },
    #[error("invalid timestep grid: {0}")]
    Grid(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("class id {id} out of range for {k} classes")]
    ClassId { id: usize, k: usize },
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid session spec: {0}")]
    Spec(String),
    #[error("exemplar memory: {0}")]
    Memory(String),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Config(Vec<String>),
    #[error("container format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
