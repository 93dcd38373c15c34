//! Incremental MapReduce over sliding windows.
//!
//! Jobs run once from scratch and then absorb input deltas, re-executing only
//! the Map, Combine and Reduce tasks whose inputs changed. Every task output is
//! memoized in a [`MemoStore`] keyed by content fingerprints; per-key
//! [contraction trees](tree) keep the number of re-executed Combine tasks
//! logarithmic in the number of map outputs.

pub mod cli;
pub mod encode;
pub mod engine;
pub mod experiments;
pub mod memo;
pub mod model;
pub mod oracle;
pub mod tree;
pub mod udf;
pub mod workloads;

pub use memo::{MemoEntry, MemoError, MemoStore, StoreStats};
pub use model::{
    Chunk, ChunkId, Fingerprint, KVPair, ModelError, Record, RunStats, TaskId, TaskKind, Value,
};
pub use tree::{ContractionTree, TreeError, TreeMode};
pub use udf::{CombineFn, FnIdentity, MapFn, ReduceFn, UdfError};
pub use workloads::{builtin_workload, BuiltinWorkload, Workload};
