//! Crate-wide error type.

/// Errors surfaced by the library. Dataset/file parsing has its own type in
/// [`crate::io`]; this covers contract violations in the numeric core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("id {id} out of vocabulary of size {vocab}")]
    IdOutOfVocab { id: usize, vocab: usize },

    #[error("{0} must be nonempty")]
    Empty(&'static str),

    #[error("invalid negative set: {0}")]
    InvalidNegativeSet(String),

    #[error("object kind does not match mapping kind: {0}")]
    KindMismatch(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
