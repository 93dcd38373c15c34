//! Self-adjusting contraction trees.
//!
//! One tree per key. The leaves are the map-side partials for that key (the
//! values one split emitted for it, in emission order); every internal node is
//! a memoized Combine task over the concatenated values of its children.
//!
//! Three shapes are supported:
//!
//! - [`TreeMode::AppendOnly`]: a single accumulator folded with each new
//!   partial (see [`append_fold`]).
//! - [`TreeMode::FixedWidth`]: a static perfect binary skeleton over a ring of
//!   bucket slots (see [`build_fixed`]).
//! - [`TreeMode::VariableWidth`]: a randomized contraction whose grouping is
//!   driven by hash-derived coins on node identities (see [`build_variable`]).
//!
//! Trees store topology and payload fingerprints only; values live in the memo
//! store, keyed by the fingerprint of `(key, child payload fingerprints)`.

mod append;
mod fixed;
mod variable;

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::encode::{self, DecodeError};
use crate::memo::MemoStore;
use crate::model::{Fingerprint, TaskId, TaskKind, Value};
use crate::udf::{CombineFn, UdfError};

pub use append::{append_fold, touch_accumulator, AccSource, Accumulator, FoldOutcome};
pub use fixed::build_fixed;
pub use variable::{build_variable, coin, contract_level, LeafSpec};

/// Levels at least this wide are processed with data parallelism.
const PAR_LEVEL_MIN: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TreeMode {
    AppendOnly,
    FixedWidth { bucket_count: usize },
    VariableWidth,
}

impl TreeMode {
    pub fn fixed(bucket_count: usize) -> Result<Self, TreeError> {
        if bucket_count < 2 {
            return Err(TreeError::InvalidBucketCount(bucket_count));
        }
        Ok(TreeMode::FixedWidth { bucket_count })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TreeMode::AppendOnly => "append",
            TreeMode::FixedWidth { .. } => "fixed",
            TreeMode::VariableWidth => "variable",
        }
    }
}

impl fmt::Display for TreeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeMode::FixedWidth { bucket_count } => write!(f, "fixed({bucket_count})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("a tree needs at least one leaf")]
    EmptyLeaves,
    #[error("fixed-width trees need at least 2 buckets, got {0}")]
    InvalidBucketCount(usize),
    #[error("expected {expected} bucket partials, got {found}")]
    BucketCountMismatch { expected: usize, found: usize },
    #[error("operation requires {expected} mode, tree is {found}")]
    ModeMismatch {
        expected: &'static str,
        found: TreeMode,
    },
    #[error("memo miss on clean node (level {level}, index {index}): cache is incoherent")]
    MemoMissOnCleanNode { level: usize, index: usize },
    #[error("memo entry missing while replaying node (level {level}, index {index})")]
    ReplayMiss { level: usize, index: usize },
    #[error("leaf count mismatch: tree has {expected}, got {found}")]
    LeafCountMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Udf(#[from] UdfError),
    #[error("undecodable memo entry: {0}")]
    Decode(#[from] DecodeError),
}

/// A value list together with the fingerprint of its canonical encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partial {
    pub values: Vec<Value>,
    pub fp: Fingerprint,
}

impl Partial {
    pub fn new(values: Vec<Value>) -> Self {
        let fp = Fingerprint::of(&encode::encode_values(&values));
        Partial { values, fp }
    }

    /// The identity partial (no values).
    pub fn empty() -> Arc<Partial> {
        static EMPTY: OnceLock<Arc<Partial>> = OnceLock::new();
        EMPTY
            .get_or_init(|| Arc::new(Partial::new(Vec::new())))
            .clone()
    }

    pub fn empty_fp() -> Fingerprint {
        Self::empty().fp
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    pub level: u32,
    pub ident: Fingerprint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Leaf,
    /// A Combine task.
    Combine,
    /// A fixed-width node whose subtree holds only padding slots. Its value
    /// is the empty list and no task runs for it.
    Identity,
}

#[derive(Clone, Debug)]
pub struct TreeNode {
    pub id: NodeId,
    /// Fingerprint of the node's combined value; a placeholder on fresh
    /// internal nodes until [`propagate`] fills it in.
    pub payload_fp: Fingerprint,
    /// Range of child indices in the level below. Empty for leaves.
    pub children: Range<usize>,
    pub kind: NodeKind,
}

#[derive(Clone, Debug)]
pub struct ContractionTree {
    key: Vec<u8>,
    mode: TreeMode,
    /// Level 0 holds the leaves; the last level holds the root.
    levels: Vec<Vec<TreeNode>>,
    acc: Option<Accumulator>,
}

impl ContractionTree {
    pub(crate) fn from_levels(key: Vec<u8>, mode: TreeMode, levels: Vec<Vec<TreeNode>>) -> Self {
        ContractionTree {
            key,
            mode,
            levels,
            acc: None,
        }
    }

    pub fn key(&self) -> &[u8] {
        &self.key
    }

    pub fn mode(&self) -> TreeMode {
        self.mode
    }

    pub fn levels(&self) -> &[Vec<TreeNode>] {
        &self.levels
    }

    pub fn leaves(&self) -> &[TreeNode] {
        self.levels.first().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of contracted levels above the leaves. An append-only tree with
    /// an accumulator has depth 1.
    pub fn depth(&self) -> usize {
        match self.mode {
            TreeMode::AppendOnly => usize::from(self.acc.is_some()),
            _ => self.levels.len().saturating_sub(1),
        }
    }

    pub fn root(&self) -> Option<&TreeNode> {
        self.levels.last().and_then(|l| l.first())
    }

    pub fn root_fp(&self) -> Option<Fingerprint> {
        match self.mode {
            TreeMode::AppendOnly => self.acc.as_ref().map(|a| a.payload_fp),
            _ => self.root().map(|n| n.payload_fp),
        }
    }

    /// Number of Combine tasks in the tree.
    pub fn combine_nodes(&self) -> usize {
        self.levels
            .iter()
            .flatten()
            .filter(|n| n.kind == NodeKind::Combine)
            .count()
    }

    pub fn accumulator(&self) -> Option<&Accumulator> {
        self.acc.as_ref()
    }

    fn require_levels(&self) -> Result<(), TreeError> {
        if self.mode == TreeMode::AppendOnly {
            return Err(TreeError::ModeMismatch {
                expected: "fixed or variable",
                found: self.mode,
            });
        }
        Ok(())
    }
}

/// Nodes whose inputs changed since the memoized run, level by level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirtySet {
    levels: Vec<Vec<bool>>,
}

impl DirtySet {
    pub fn all(tree: &ContractionTree) -> Self {
        DirtySet {
            levels: tree.levels.iter().map(|l| vec![true; l.len()]).collect(),
        }
    }

    pub fn none(tree: &ContractionTree) -> Self {
        DirtySet {
            levels: tree.levels.iter().map(|l| vec![false; l.len()]).collect(),
        }
    }

    /// Marks the leaves at `indices` dirty and closes the set upward.
    pub fn from_leaves(tree: &ContractionTree, indices: &[usize]) -> Self {
        let mut set = Self::none(tree);
        if let Some(l0) = set.levels.first_mut() {
            for &i in indices {
                l0[i] = true;
            }
        }
        for l in 1..set.levels.len() {
            for (i, node) in tree.levels[l].iter().enumerate() {
                set.levels[l][i] = set.levels[l - 1][node.children.clone()].iter().any(|d| *d);
            }
        }
        set
    }

    /// Compares a freshly built tree against the tree of the previous run.
    ///
    /// A leaf is dirty when its identity is new or its payload changed; an
    /// internal node is dirty when its identity is new or any child is dirty.
    /// Clean internal nodes inherit their payload fingerprint from `old`.
    pub fn diff(new: &mut ContractionTree, old: &ContractionTree) -> Self {
        let mut levels = Vec::with_capacity(new.levels.len());
        for (l, nodes) in new.levels.iter_mut().enumerate() {
            let old_level: HashMap<Fingerprint, Fingerprint> = old
                .levels
                .get(l)
                .map(|ol| ol.iter().map(|n| (n.id.ident, n.payload_fp)).collect())
                .unwrap_or_default();
            let mut flags = Vec::with_capacity(nodes.len());
            for node in nodes.iter_mut() {
                let old_payload = old_level.get(&node.id.ident).copied();
                let dirty = if l == 0 {
                    old_payload != Some(node.payload_fp)
                } else {
                    let below: &Vec<bool> = &levels[l - 1];
                    let child_dirty = below[node.children.clone()].iter().any(|d| *d);
                    match old_payload {
                        Some(fp) if !child_dirty => {
                            node.payload_fp = fp;
                            false
                        }
                        _ => true,
                    }
                };
                flags.push(dirty);
            }
            levels.push(flags);
        }
        DirtySet { levels }
    }

    pub fn is_dirty(&self, level: usize, index: usize) -> bool {
        self.levels[level][index]
    }

    pub fn level(&self, level: usize) -> &[bool] {
        &self.levels[level]
    }

    pub fn count(&self) -> usize {
        self.levels.iter().flatten().filter(|d| **d).count()
    }

    pub fn dirty_ids(&self, tree: &ContractionTree, level: usize) -> Vec<NodeId> {
        tree.levels[level]
            .iter()
            .zip(&self.levels[level])
            .filter(|(_, d)| **d)
            .map(|(n, _)| n.id)
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// What to do with dirty nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecPolicy {
    /// Execute Combine for every dirty node and store the result.
    Execute,
    /// Execute nothing: every node must already be memoized. Reads do not mark
    /// entries. Used to rebuild in-memory state from a persisted store.
    Replay,
}

pub struct PropagateCtx<'a> {
    pub combine: &'a CombineFn,
    pub memo: &'a MemoStore,
    pub policy: ExecPolicy,
    /// Recompute (instead of failing) when a clean node is missing from memo.
    pub recompute_on_miss: bool,
}

/// The value at a tree root: either a raw leaf partial or a memoized output.
#[derive(Clone, Debug)]
pub enum RootValue {
    Leaf(Arc<Partial>),
    Stored(Arc<[u8]>),
}

impl RootValue {
    pub fn values(&self) -> Result<Vec<Value>, DecodeError> {
        match self {
            RootValue::Leaf(p) => Ok(p.values.clone()),
            RootValue::Stored(bytes) => encode::decode_values(bytes),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Propagation {
    pub root_fp: Fingerprint,
    pub root: RootValue,
    /// Combine tasks executed.
    pub fresh: u64,
    /// Combine tasks served from memo.
    pub hits: u64,
    pub nonmonotonic: u64,
    /// Every Combine task touched, in level order.
    pub task_ids: Vec<TaskId>,
    /// Wall time of each executed task, in level order.
    pub fresh_times: Vec<Duration>,
}

struct NodeResult {
    payload_fp: Fingerprint,
    bytes: Option<Arc<[u8]>>,
    task_id: Option<TaskId>,
    fresh_time: Option<Duration>,
    hit: bool,
    nonmonotonic: bool,
}

/// Evaluates the tree bottom-up, one level at a time.
///
/// Clean nodes are read from memo (and counted as hits). Dirty nodes execute
/// Combine over their children's concatenated values and store the result.
/// Each level completes before the next one starts; nodes within a level run
/// in parallel. Results are identical under any scheduling.
pub fn propagate(
    tree: &mut ContractionTree,
    dirty: &DirtySet,
    leaves: &[Arc<Partial>],
    ctx: &PropagateCtx<'_>,
) -> Result<Propagation, TreeError> {
    tree.require_levels()?;
    if tree.levels.is_empty() {
        return Err(TreeError::EmptyLeaves);
    }
    if leaves.len() != tree.levels[0].len() {
        return Err(TreeError::LeafCountMismatch {
            expected: tree.levels[0].len(),
            found: leaves.len(),
        });
    }
    let mut out = Propagation {
        root_fp: leaves[0].fp,
        root: RootValue::Leaf(leaves[0].clone()),
        fresh: 0,
        hits: 0,
        nonmonotonic: 0,
        task_ids: Vec::new(),
        fresh_times: Vec::new(),
    };
    // Outputs of the level below, for internal levels.
    let mut below: Vec<Option<Arc<[u8]>>> = Vec::new();
    let key = tree.key.clone();

    for l in 1..tree.levels.len() {
        let (lower, upper) = tree.levels.split_at_mut(l);
        let lower = &lower[l - 1];
        let nodes = &mut upper[0];
        let flags = dirty.level(l);
        let eval = |i: usize| -> Result<NodeResult, TreeError> {
            eval_node(&key, l, i, &nodes[i], flags[i], lower, &below, leaves, ctx)
        };
        let results: Vec<NodeResult> = if nodes.len() >= PAR_LEVEL_MIN {
            (0..nodes.len())
                .into_par_iter()
                .with_min_len(64)
                .map(eval)
                .collect::<Result<_, _>>()?
        } else {
            (0..nodes.len()).map(eval).collect::<Result<_, _>>()?
        };
        let mut next = Vec::with_capacity(results.len());
        for (node, r) in nodes.iter_mut().zip(results) {
            node.payload_fp = r.payload_fp;
            if let Some(t) = r.task_id {
                out.task_ids.push(t);
            }
            if let Some(d) = r.fresh_time {
                out.fresh += 1;
                out.fresh_times.push(d);
            }
            out.hits += u64::from(r.hit);
            out.nonmonotonic += u64::from(r.nonmonotonic);
            next.push(r.bytes);
        }
        below = next;
    }

    if tree.levels.len() > 1 {
        let root = &tree.levels.last().unwrap()[0];
        out.root_fp = root.payload_fp;
        out.root = match &below[0] {
            Some(b) => RootValue::Stored(b.clone()),
            None => RootValue::Leaf(Partial::empty()),
        };
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn eval_node(
    key: &[u8],
    level: usize,
    index: usize,
    node: &TreeNode,
    dirty: bool,
    lower: &[TreeNode],
    below: &[Option<Arc<[u8]>>],
    leaves: &[Arc<Partial>],
    ctx: &PropagateCtx<'_>,
) -> Result<NodeResult, TreeError> {
    if node.kind == NodeKind::Identity {
        return Ok(NodeResult {
            payload_fp: Partial::empty_fp(),
            bytes: None,
            task_id: None,
            fresh_time: None,
            hit: false,
            nonmonotonic: false,
        });
    }
    let child_fps: Vec<Fingerprint> = lower[node.children.clone()]
        .iter()
        .map(|c| c.payload_fp)
        .collect();
    let input_fp = Fingerprint::of(&encode::encode_node_input(key, &child_fps));
    let task_id = TaskId::new(TaskKind::Combine, ctx.combine.fn_id(), input_fp);

    if ctx.policy == ExecPolicy::Replay {
        let bytes = ctx
            .memo
            .peek(&task_id)
            .ok_or(TreeError::ReplayMiss { level, index })?;
        return Ok(NodeResult {
            payload_fp: Fingerprint::of(&bytes),
            bytes: Some(bytes),
            task_id: Some(task_id),
            fresh_time: None,
            hit: false,
            nonmonotonic: false,
        });
    }

    if !dirty {
        match ctx.memo.get(&task_id) {
            Some(entry) => {
                return Ok(NodeResult {
                    payload_fp: node.payload_fp,
                    bytes: Some(entry.output),
                    task_id: Some(task_id),
                    fresh_time: None,
                    hit: true,
                    nonmonotonic: false,
                })
            }
            None if !ctx.recompute_on_miss => {
                return Err(TreeError::MemoMissOnCleanNode { level, index })
            }
            None => {}
        }
    }

    let mut input: Vec<Value> = Vec::new();
    for c in node.children.clone() {
        if level == 1 {
            input.extend(leaves[c].values.iter().cloned());
        } else if let Some(bytes) = &below[c] {
            input.extend(encode::decode_values(bytes)?);
        }
    }
    let start = Instant::now();
    let output = ctx.combine.apply(key, &input)?;
    let elapsed = start.elapsed();
    let bytes: Arc<[u8]> = encode::encode_values(&output).into();
    ctx.memo.put(task_id, bytes.clone());
    Ok(NodeResult {
        payload_fp: Fingerprint::of(&bytes),
        bytes: Some(bytes),
        task_id: Some(task_id),
        fresh_time: Some(elapsed),
        hit: false,
        nonmonotonic: output.len() > input.len(),
    })
}
