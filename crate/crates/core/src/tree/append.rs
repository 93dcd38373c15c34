//! Append-only folding: one accumulator per key, combined with each new
//! partial as it arrives. The first partial seeds the accumulator without a
//! task, so `n` partials cost `n - 1` combines.

use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{ContractionTree, ExecPolicy, Partial, PropagateCtx, TreeError, TreeMode};
use crate::encode;
use crate::memo::MemoStore;
use crate::model::{Fingerprint, TaskId, TaskKind, Value};

/// Where the accumulator's value lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AccSource {
    /// Only one partial has been folded; the value is that partial.
    Leaf(Arc<Partial>),
    /// The output of the Combine task with this input fingerprint.
    Combine { input_fp: Fingerprint },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Accumulator {
    pub payload_fp: Fingerprint,
    pub source: AccSource,
    /// Partials folded so far.
    pub partials: u64,
}

impl Accumulator {
    pub fn task_id(&self, combine_fn_id: Fingerprint) -> Option<TaskId> {
        match self.source {
            AccSource::Leaf(_) => None,
            AccSource::Combine { input_fp } => {
                Some(TaskId::new(TaskKind::Combine, combine_fn_id, input_fp))
            }
        }
    }

    /// Reads the current value without marking the memo entry.
    pub fn values(
        &self,
        memo: &MemoStore,
        combine_fn_id: Fingerprint,
    ) -> Result<Vec<Value>, TreeError> {
        match &self.source {
            AccSource::Leaf(p) => Ok(p.values.clone()),
            AccSource::Combine { .. } => {
                let id = self.task_id(combine_fn_id).expect("combine source");
                let bytes = memo
                    .peek(&id)
                    .ok_or(TreeError::MemoMissOnCleanNode { level: 1, index: 0 })?;
                Ok(encode::decode_values(&bytes)?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    /// Whether a Combine task executed.
    pub fresh: bool,
    pub task_id: Option<TaskId>,
    pub time: Duration,
    pub nonmonotonic: bool,
}

impl ContractionTree {
    pub fn new_append(key: &[u8]) -> Self {
        ContractionTree::from_levels(key.to_vec(), TreeMode::AppendOnly, Vec::new())
    }

    pub fn with_accumulator(key: &[u8], acc: Accumulator) -> Self {
        let mut tree = Self::new_append(key);
        tree.acc = Some(acc);
        tree
    }
}

fn require_append(tree: &ContractionTree) -> Result<(), TreeError> {
    if tree.mode != TreeMode::AppendOnly {
        return Err(TreeError::ModeMismatch {
            expected: "append",
            found: tree.mode,
        });
    }
    Ok(())
}

/// Folds `partial` into the tree's accumulator.
///
/// The previous accumulator is read with `peek`, so unless something else
/// touches it this run it is evicted at the end of the run.
pub fn append_fold(
    tree: &mut ContractionTree,
    partial: &Arc<Partial>,
    ctx: &PropagateCtx<'_>,
) -> Result<FoldOutcome, TreeError> {
    require_append(tree)?;
    let Some(acc) = tree.acc.take() else {
        tree.acc = Some(Accumulator {
            payload_fp: partial.fp,
            source: AccSource::Leaf(partial.clone()),
            partials: 1,
        });
        return Ok(FoldOutcome {
            fresh: false,
            task_id: None,
            time: Duration::ZERO,
            nonmonotonic: false,
        });
    };
    let result = fold_into(&tree.key, &acc, partial, ctx);
    match result {
        Ok((next, outcome)) => {
            tree.acc = Some(next);
            Ok(outcome)
        }
        Err(e) => {
            tree.acc = Some(acc);
            Err(e)
        }
    }
}

fn fold_into(
    key: &[u8],
    acc: &Accumulator,
    partial: &Arc<Partial>,
    ctx: &PropagateCtx<'_>,
) -> Result<(Accumulator, FoldOutcome), TreeError> {
    let fn_id = ctx.combine.fn_id();
    let input_fp = Fingerprint::of(&encode::encode_node_input(
        key,
        &[acc.payload_fp, partial.fp],
    ));
    let task_id = TaskId::new(TaskKind::Combine, fn_id, input_fp);
    let (bytes, fresh, time, nonmonotonic): (Arc<[u8]>, bool, Duration, bool) = match ctx.policy {
        ExecPolicy::Replay => {
            let bytes = ctx
                .memo
                .peek(&task_id)
                .ok_or(TreeError::ReplayMiss { level: 1, index: 0 })?;
            (bytes, false, Duration::ZERO, false)
        }
        ExecPolicy::Execute => {
            let mut input = acc.values(ctx.memo, fn_id)?;
            input.extend(partial.values.iter().cloned());
            let start = Instant::now();
            let output = ctx.combine.apply(key, &input)?;
            let time = start.elapsed();
            let bytes: Arc<[u8]> = encode::encode_values(&output).into();
            ctx.memo.put(task_id, bytes.clone());
            (bytes, true, time, output.len() > input.len())
        }
    };
    let next = Accumulator {
        payload_fp: Fingerprint::of(&bytes),
        source: AccSource::Combine { input_fp },
        partials: acc.partials + 1,
    };
    Ok((
        next,
        FoldOutcome {
            fresh,
            task_id: Some(task_id),
            time,
            nonmonotonic,
        },
    ))
}

/// Marks the accumulator's memo entry live for this run without changing it.
/// Returns the task touched, if the accumulator is memoized.
pub fn touch_accumulator(
    tree: &ContractionTree,
    memo: &MemoStore,
    combine_fn_id: Fingerprint,
) -> Result<Option<TaskId>, TreeError> {
    require_append(tree)?;
    let Some(id) = tree.acc.as_ref().and_then(|a| a.task_id(combine_fn_id)) else {
        return Ok(None);
    };
    memo.get(&id)
        .ok_or(TreeError::MemoMissOnCleanNode { level: 1, index: 0 })?;
    Ok(Some(id))
}
