//! Temporal knowledge graph reasoning over query-aware temporal paths.
//!
//! The pipeline: timestamped fact snapshots are merged into a history
//! temporal graph per query; an entity-independent message-passing network
//! propagates query-aware path representations over it; a scoring head
//! ranks all candidate entities for link prediction at future timestamps.
//! Training uses negative sampling plus an orthogonality regularizer on
//! the relation table, evaluation reports time-aware filtered MRR and
//! Hits@k, and reasoning evidence is extracted by differentiating scores
//! with respect to per-edge gates and beam-searching over paths.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod evidence;
pub mod gradcheck;
pub mod graph;
pub mod learning;
pub mod model;
pub mod path;
pub mod synthetic;

pub use error::{DataError, ModelError};
