//! From-scratch evaluation, used as ground truth.
//!
//! No trees and no memoization: map every record, group values by key in
//! input order, left-fold Combine one value at a time, then Reduce. Runs on
//! one thread.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::engine::{DeltaOp, Job, UpdateDelta};
use crate::model::{Chunk, ChunkId, KVPair, Value};
use crate::tree::TreeMode;
use crate::udf::UdfError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleResult {
    /// Sorted by key.
    pub output: Vec<KVPair>,
}

fn group(job: &Job, input: &[Chunk]) -> Result<BTreeMap<Vec<u8>, Vec<Value>>, UdfError> {
    let mut grouped: BTreeMap<Vec<u8>, Vec<Value>> = BTreeMap::new();
    for chunk in input {
        for record in chunk.records.iter() {
            for pair in job.map.apply(record)? {
                let (k, v) = pair.into_parts();
                grouped.entry(k).or_default().push(v);
            }
        }
    }
    Ok(grouped)
}

pub fn scratch_run(job: &Job, input: &[Chunk]) -> Result<OracleResult, UdfError> {
    let mut output = Vec::new();
    for (key, values) in group(job, input)? {
        let mut acc: Vec<Value> = Vec::new();
        for v in values {
            acc.push(v);
            acc = job.combine.apply(&key, &acc)?;
        }
        output.extend(job.reduce.apply(&key, &acc)?);
    }
    output.sort_by(|a, b| a.key().cmp(b.key()));
    Ok(OracleResult { output })
}

/// A plain map, group, reduce pipeline with the same split granularity as
/// the engine but no Combine tree and no memo.
#[derive(Clone, Debug)]
pub struct DirectResult {
    pub output: Vec<KVPair>,
    pub n_i: u64,
    pub n_m: u64,
    pub map_tasks: u64,
    pub reduce_tasks: u64,
    pub wall: Duration,
}

pub fn direct_run(job: &Job, input: &[Chunk]) -> Result<DirectResult, UdfError> {
    let start = Instant::now();
    let mut map_tasks = 0u64;
    let mut records = 0usize;
    let mut open = false;
    for chunk in input {
        if !open {
            map_tasks += 1;
            open = true;
        }
        records += chunk.records.len();
        let fixed = matches!(job.mode, TreeMode::FixedWidth { .. });
        if fixed || records >= job.split_size {
            open = false;
            records = 0;
        }
    }
    let grouped = group(job, input)?;
    let reduce_tasks = grouped.len() as u64;
    let n_m = grouped.values().map(|v| v.len() as u64).sum();
    let mut output = Vec::new();
    for (key, values) in grouped {
        output.extend(job.reduce.apply(&key, &values)?);
    }
    output.sort_by(|a, b| a.key().cmp(b.key()));
    Ok(DirectResult {
        output,
        n_i: input.iter().map(|c| c.records.len() as u64).sum(),
        n_m,
        map_tasks,
        reduce_tasks,
        wall: start.elapsed(),
    })
}

/// An independent model of the logical input under a sequence of deltas.
///
/// Fixed-width windows hold at most `bucket_count` chunks, oldest first; a
/// slide into a full window drops the oldest chunk.
#[derive(Clone, Debug)]
pub struct ReferenceInput {
    mode: TreeMode,
    chunks: Vec<Chunk>,
    next_id: u64,
}

impl ReferenceInput {
    pub fn new(mode: TreeMode, initial: Vec<Chunk>) -> Self {
        let next_id = initial.iter().map(|c| c.id.0 + 1).max().unwrap_or(0);
        ReferenceInput {
            mode,
            chunks: initial,
            next_id,
        }
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn ids(&self) -> Vec<ChunkId> {
        self.chunks.iter().map(|c| c.id).collect()
    }

    /// Applies a delta, returning the ids given to new chunks. Mode rules are
    /// not checked here.
    pub fn apply(&mut self, delta: &UpdateDelta) -> Result<Vec<ChunkId>, ChunkId> {
        let mut added = Vec::new();
        for op in &delta.ops {
            match op {
                DeltaOp::AppendChunk(records) | DeltaOp::SlideBucket(records) => {
                    let id = self.next_id;
                    self.next_id += 1;
                    self.chunks.push(Chunk::new(id, records.clone()));
                    added.push(ChunkId(id));
                    if let (TreeMode::FixedWidth { bucket_count }, DeltaOp::SlideBucket(_)) =
                        (self.mode, op)
                    {
                        if self.chunks.len() > bucket_count {
                            self.chunks.remove(0);
                        }
                    }
                }
                DeltaOp::ReplaceChunk(id, records) => {
                    let pos = self.position(*id)?;
                    self.chunks[pos] = Chunk::new(id.0, records.clone());
                }
                DeltaOp::DeleteChunk(id) => {
                    let pos = self.position(*id)?;
                    self.chunks.remove(pos);
                }
            }
        }
        Ok(added)
    }

    fn position(&self, id: ChunkId) -> Result<usize, ChunkId> {
        self.chunks.iter().position(|c| c.id == id).ok_or(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{self, BuiltinWorkload};

    fn pairs(out: &[KVPair]) -> Vec<(String, String)> {
        out.iter()
            .map(|p| {
                (
                    String::from_utf8(p.key().to_vec()).unwrap(),
                    String::from_utf8(p.value().to_vec()).unwrap(),
                )
            })
            .collect()
    }

    fn wc() -> Job {
        Job::new(workloads::wordcount(), TreeMode::VariableWidth)
    }

    #[test]
    fn empty_input() {
        assert!(scratch_run(&wc(), &[]).unwrap().output.is_empty());
    }

    #[test]
    fn wordcount_by_hand() {
        let input = vec![Chunk::from_strs(0, &["a b"]), Chunk::from_strs(1, &["b c"])];
        let out = scratch_run(&wc(), &input).unwrap();
        let expected = vec![
            ("a".to_string(), "1".to_string()),
            ("b".to_string(), "2".to_string()),
            ("c".to_string(), "1".to_string()),
        ];
        assert_eq!(pairs(&out.output), expected);
        assert_eq!(direct_run(&wc(), &input).unwrap().output, out.output);
    }

    #[test]
    fn histogram_and_sum() {
        let input = vec![
            Chunk::from_strs(0, &["3", "15", "-1"]),
            Chunk::from_strs(1, &["12"]),
        ];
        let h = Job::new(
            BuiltinWorkload::Histogram.workload(),
            TreeMode::VariableWidth,
        );
        assert_eq!(
            pairs(&scratch_run(&h, &input).unwrap().output),
            vec![
                ("-10--1".to_string(), "1".to_string()),
                ("0-9".to_string(), "1".to_string()),
                ("10-19".to_string(), "2".to_string()),
            ]
        );
        let s = Job::new(workloads::windowed_sum(), TreeMode::AppendOnly);
        assert_eq!(
            pairs(&scratch_run(&s, &input).unwrap().output),
            vec![("sum".to_string(), "29".to_string())]
        );
    }

    #[test]
    fn direct_run_counts_splits() {
        let input: Vec<Chunk> = (0..7).map(|i| Chunk::from_strs(i, &["x y"])).collect();
        let job = wc().with_split_size(3);
        let d = direct_run(&job, &input).unwrap();
        assert_eq!(d.map_tasks, 3);
        assert_eq!(d.reduce_tasks, 2);
    }

    #[test]
    fn reference_window_drops_oldest() {
        let mode = TreeMode::fixed(2).unwrap();
        let mut r = ReferenceInput::new(
            mode,
            vec![Chunk::from_strs(0, &["a"]), Chunk::from_strs(1, &["b"])],
        );
        let rec = |s: &str| vec![crate::model::Record::try_from(s).unwrap()];
        let added = r
            .apply(&UpdateDelta::new(vec![DeltaOp::SlideBucket(rec("c"))]))
            .unwrap();
        assert_eq!(added, vec![ChunkId(2)]);
        assert_eq!(r.ids(), vec![ChunkId(1), ChunkId(2)]);
        assert_eq!(
            r.apply(&UpdateDelta::new(vec![DeltaOp::DeleteChunk(ChunkId(0))])),
            Err(ChunkId(0))
        );
    }
}
