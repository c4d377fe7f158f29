//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape error in `{op}`: {lhs:?} vs {rhs:?}{}", detail_suffix(detail))]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        detail: String,
    },

    /// Axis out of range for a tensor rank.
    #[error("axis {axis} out of range for rank {rank} in `{op}`")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    /// Input outside an operation's mathematical domain (log/sqrt of negatives, ...).
    #[error("domain error in `{op}`: {msg}")]
    Domain { op: &'static str, msg: String },

    /// Non-finite values or a numeric abort during training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint does not match the requesting configuration.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn detail_suffix(detail: &str) -> String {
    if detail.is_empty() {
        String::new()
    } else {
        format!(" ({detail})")
    }
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            detail: String::new(),
        }
    }

    pub fn shape_msg(op: &'static str, lhs: &[usize], rhs: &[usize], detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
