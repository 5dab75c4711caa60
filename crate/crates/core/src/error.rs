use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate vector in {op}: norm below 1e-12")]
    DegenerateVector { op: &'static str },

    #[error("degenerate centroid: prototypes of class {class} cancel out")]
    DegenerateCentroid { class: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
