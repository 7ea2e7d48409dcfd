use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the primitive's signature.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Operand values outside the primitive's domain (log of non-positive, division by zero).
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward already ran on this graph")]
    GraphConsumed,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("non-finite evaluation at coordinate {index}")]
    NonFinite { index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    /// Transport cost between samples with different labels.
    #[error("infinite transport cost: label {0} vs {1}")]
    InfiniteCost(usize, usize),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }
}
