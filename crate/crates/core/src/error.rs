use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("instance {instance}: duplicate predicate `{predicate}`")]
    DuplicatePredicate { instance: usize, predicate: String },

    #[error("instance {instance}: facts do not reproduce the text")]
    FactMismatch { instance: usize },

    #[error("invalid triple: {0}")]
    InvalidTriple(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("plan: {0}")]
    Plan(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter: {0}")]
    Param(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("predicate id {0} is not in the instance")]
    PredicateNotInInstance(usize),

    #[error("no candidate state at fact {t}")]
    NoCandidates { t: usize },

    #[error("search space of {size} paths exceeds the limit {limit}")]
    SearchSpace { size: f64, limit: f64 },

    #[error("empty fact")]
    EmptyFact,

    #[error("config: {0}")]
    Config(String),

    #[error("patterns: {0}")]
    Patterns(String),

    #[error("synthetic spec: {0}")]
    Synth(String),

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
