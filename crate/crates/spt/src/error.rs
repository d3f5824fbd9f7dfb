//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SptError {
    #[error("duplicate schema name: {0}")]
    DuplicateSchema(String),
    #[error("token id {0} out of range (vocab size {1})")]
    InvalidTokenId(usize, usize),
    #[error("role name contains a structural literal: {0:?}")]
    InvalidRoleName(String),
    #[error("sequence length {0} exceeds max_seq_len {1}")]
    SeqTooLong(usize, usize),
    #[error("non-finite value encountered: {0}")]
    Numerical(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gold schema {0:?} not present in pool")]
    LabelMismatch(String),
    #[error("dataset filter left no samples for phase {0}")]
    EmptyDataset(String),
    #[error("phase order violated: {0}")]
    PhaseOrder(String),
    #[error("infeasible generation spec: {0}")]
    Spec(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown document id {0}")]
    InvalidDoc(usize),
    #[error("generation truncated before grammar completion (budget {0} tokens)")]
    TruncatedGeneration(usize),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SptError>;
