use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("unknown token id {0}")]
    UnknownToken(usize),

    #[error("token {0} cannot be composed (not a codebook token)")]
    NotComposable(usize),

    #[error("collision ordinal {ordinal} for codes {codes:?} exceeds collision vocabulary of {capacity}")]
    CollisionOverflow {
        codes: Vec<usize>,
        ordinal: usize,
        capacity: usize,
    },

    #[error("duplicate semantic id {0:?}")]
    DuplicateId(Vec<usize>),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("beam search produced {found} complete items, {wanted} requested")]
    BeamExhausted { found: usize, wanted: usize },

    #[error("rank cutoff must be at least 1")]
    Cutoff,

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("item universe mismatch: {0}")]
    Universe(String),

    #[error("user {user}: {source}")]
    User {
        user: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
