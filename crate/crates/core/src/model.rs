//! Records, chunks, key-value pairs, fingerprints, task identities and run
//! statistics shared by every other module.

use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encode;

/// A value emitted by Map or produced by Combine. Opaque bytes.
pub type Value = Vec<u8>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("records must be non-empty")]
    EmptyRecord,
    #[error("keys must be non-empty")]
    EmptyKey,
}

/// 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint([u8; 32]);

impl Fingerprint {
    pub const LEN: usize = 32;

    pub fn of(bytes: &[u8]) -> Self {
        Fingerprint(Sha256::digest(bytes).into())
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Fingerprint(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// The first eight digest bytes as an integer; uniformly distributed.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().unwrap())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Deterministic digest of an arbitrary byte string.
pub fn fingerprint(bytes: &[u8]) -> Fingerprint {
    Fingerprint::of(bytes)
}

/// The unit consumed by a Map function.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Record(Vec<u8>);

impl Record {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, ModelError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(ModelError::EmptyRecord);
        }
        Ok(Record(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }
}

impl fmt::Debug for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Record({:?})", String::from_utf8_lossy(&self.0))
    }
}

impl TryFrom<&str> for Record {
    type Error = ModelError;

    fn try_from(s: &str) -> Result<Self, Self::Error> {
        Record::new(s.as_bytes().to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChunkId(pub u64);

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An identified, ordered run of records. Ids are assigned by whoever ingests
/// the data and survive content replacement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub id: ChunkId,
    pub records: Arc<Vec<Record>>,
}

impl Chunk {
    pub fn new(id: u64, records: Vec<Record>) -> Self {
        Chunk {
            id: ChunkId(id),
            records: Arc::new(records),
        }
    }

    /// Builds a chunk from text lines, one record per line. Panics on empty lines.
    pub fn from_strs(id: u64, records: &[&str]) -> Self {
        Chunk::new(
            id,
            records
                .iter()
                .map(|r| Record::try_from(*r).expect("empty record"))
                .collect(),
        )
    }

    pub fn content_fingerprint(&self) -> Fingerprint {
        Fingerprint::of(&encode::encode_chunk_records(&self.records))
    }
}

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KVPair {
    key: Vec<u8>,
    value: Value,
}

impl KVPair {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Value>) -> Result<Self, ModelError> {
        let key = key.into();
        if key.is_empty() {
            return Err(ModelError::EmptyKey);
        }
        Ok(KVPair {
            key,
            value: value.into(),
        })
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }

    pub fn value(&self) -> &[u8] {
        &self.value
    }

    pub fn into_parts(self) -> (Vec<u8>, Value) {
        (self.key, self.value)
    }
}

impl fmt::Debug for KVPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({:?}, {:?})",
            String::from_utf8_lossy(&self.key),
            String::from_utf8_lossy(&self.value)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum TaskKind {
    Map = 0,
    Combine = 1,
    Reduce = 2,
}

impl TaskKind {
    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(TaskKind::Map),
            1 => Some(TaskKind::Combine),
            2 => Some(TaskKind::Reduce),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Map => "map",
            TaskKind::Combine => "combine",
            TaskKind::Reduce => "reduce",
        }
    }
}

/// Memoization key: which kind of task, which function (name + version), and
/// the fingerprint of the task's canonical input encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId {
    pub kind: TaskKind,
    pub fn_id: Fingerprint,
    pub input_fp: Fingerprint,
}

impl TaskId {
    pub fn new(kind: TaskKind, fn_id: Fingerprint, input_fp: Fingerprint) -> Self {
        TaskId {
            kind,
            fn_id,
            input_fp,
        }
    }
}

/// Per-run task accounting.
///
/// `map_run + map_hit` is the number of Map tasks N_M, `combine_run +
/// combine_hit` the number of combiner-tree tasks N_C (also reported as
/// `combine_stages`), and `reduce_run + reduce_hit` the number of Reduce
/// tasks N_R, which always equals `n_mk`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    /// Input size in records.
    pub n_i: u64,
    /// Key-value pairs emitted by Map over the whole current input.
    pub n_m: u64,
    /// Distinct keys emitted by Map.
    pub n_mk: u64,
    /// Output size in pairs.
    pub n_o: u64,
    pub map_run: u64,
    pub map_hit: u64,
    pub combine_run: u64,
    pub combine_hit: u64,
    pub reduce_run: u64,
    pub reduce_hit: u64,
    pub combine_stages: u64,
    /// Distinct task identities touched by the run (tasks with equal inputs
    /// share one memo entry).
    pub distinct_tasks: u64,
    /// Combine executions whose output had more values than their input.
    pub nonmonotonic_combines: u64,
    /// Memo entries removed at the end of the run.
    pub evicted: u64,
    /// Memo entries live after the run.
    pub memo_entries: u64,
}

impl RunStats {
    pub fn map_tasks(&self) -> u64 {
        self.map_run + self.map_hit
    }

    pub fn combine_tasks(&self) -> u64 {
        self.combine_run + self.combine_hit
    }

    pub fn reduce_tasks(&self) -> u64 {
        self.reduce_run + self.reduce_hit
    }

    pub fn total_tasks(&self) -> u64 {
        self.map_tasks() + self.combine_tasks() + self.reduce_tasks()
    }

    pub fn fresh_tasks(&self) -> u64 {
        self.map_run + self.combine_run + self.reduce_run
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn record_and_key_invariants() {
        assert_eq!(Record::new(Vec::new()), Err(ModelError::EmptyRecord));
        assert_eq!(
            KVPair::new(Vec::new(), b"v".to_vec()),
            Err(ModelError::EmptyKey)
        );
        assert!(KVPair::new(b"k".to_vec(), Vec::new()).is_ok());
    }

    #[test]
    fn fingerprint_is_deterministic_and_discriminating() {
        assert_eq!(fingerprint(b"abc"), fingerprint(b"abc"));
        assert_ne!(fingerprint(b"a"), fingerprint(b"b"));
        // SHA-256("a"), stable across platforms and restarts.
        assert_eq!(
            fingerprint(b"a").to_hex(),
            "ca978112ca1bbdcafac231b39a23dc4da786eff8147c4e72b9807785afee48bb"
        );
    }

    #[test]
    fn no_collisions_over_random_corpus() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut inputs = HashSet::new();
        while inputs.len() < 10_000 {
            let len = rng.random_range(0..12);
            let s: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            inputs.insert(s);
        }
        let digests: HashSet<Fingerprint> = inputs.iter().map(|s| fingerprint(s)).collect();
        assert_eq!(digests.len(), inputs.len());
    }

    #[test]
    fn task_id_equality_needs_all_fields() {
        let a = fingerprint(b"a");
        let b = fingerprint(b"b");
        let t = TaskId::new(TaskKind::Map, a, b);
        assert_eq!(t, TaskId::new(TaskKind::Map, a, b));
        assert_ne!(t, TaskId::new(TaskKind::Combine, a, b));
        assert_ne!(t, TaskId::new(TaskKind::Map, b, b));
        assert_ne!(t, TaskId::new(TaskKind::Map, a, a));
    }

    #[test]
    fn chunk_content_fingerprint_ignores_id() {
        let a = Chunk::from_strs(1, &["x y"]);
        let b = Chunk::from_strs(2, &["x y"]);
        let c = Chunk::from_strs(1, &["x", "y"]);
        assert_eq!(a.content_fingerprint(), b.content_fingerprint());
        assert_ne!(a.content_fingerprint(), c.content_fingerprint());
    }
}
