use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("no interactions left after filtering")]
    EmptyDataset,

    #[error("items {first:?} and {second:?} tokenize to the same sequence")]
    DuplicateTitle { first: String, second: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("all outcome rewards are zero; the flow network is degenerate")]
    DegenerateFlow,

    #[error("invalid reward for item {item:?}: {value}")]
    InvalidReward { item: String, value: f64 },

    #[error("missing reward for item {0:?}")]
    MissingReward(String),

    #[error("unknown item {0:?}")]
    UnknownItem(String),

    #[error("node {node} has no child with token {token}")]
    InvalidAction { node: usize, token: String },

    #[error("node {0} is a leaf and has no next-token distribution")]
    InvalidState(usize),

    #[error("zero flow at node {0}; process reward is undefined")]
    ZeroFlow(usize),

    #[error("item {0:?} has zero reward; its log-reward is -inf")]
    ZeroRewardItem(String),

    #[error("value {value} outside the domain of {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
