//! Error types shared across the crate.

use std::path::PathBuf;

/// Errors raised while loading, validating or deriving datasets.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed quadruple line: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: {field} {value} out of range (must be < {bound})")]
    OutOfRange {
        path: PathBuf,
        line: usize,
        field: &'static str,
        value: u64,
        bound: usize,
    },
    #[error("entity id {id} out of range (num_entities = {num_entities})")]
    EntityOutOfRange { id: usize, num_entities: usize },
    #[error("need at least {needed} distinct timestamps, found {found}")]
    TooFewTimestamps { needed: usize, found: usize },
    #[error("split fractions ({train}, {valid}) invalid: {reason}")]
    BadSplitFractions {
        train: f64,
        valid: f64,
        reason: String,
    },
    #[error("split timestamp ordering violated: {0}")]
    SplitOrdering(String),
    #[error("history snapshot at {snapshot} is not before query time {query_time}")]
    HistoryNotStrict { snapshot: usize, query_time: usize },
    #[error("gold fact ({s}, {r}, {o}) missing from the truth set at its timestamp")]
    GoldMissing { s: usize, r: usize, o: usize },
    #[error("no ranks to aggregate")]
    EmptyRanks,
    #[error("synthetic generation infeasible: {0}")]
    Infeasible(String),
    #[error("inductive split left side {side} empty; try a different ratio or seed")]
    EmptySide { side: &'static str },
}

/// Errors raised by model configuration, checkpoints and training.
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown relation id {id} (num_relations = {num_relations})")]
    UnknownRelation { id: usize, num_relations: usize },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}
