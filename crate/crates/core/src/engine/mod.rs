//! Initial runs and dynamic updates.
//!
//! The engine keeps the current input as a list of persistent splits. Each
//! run executes one memoized Map task per split, groups the per-split
//! partials by key, updates one contraction tree per key and runs one
//! memoized Reduce task per key on the tree root. Only tasks whose input
//! fingerprints are new execute; everything else is read from the memo store.

mod layout;
mod ledger;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::encode::{self, DecodeError};
use crate::memo::{MemoError, MemoStore};
use crate::model::{
    Chunk, ChunkId, Fingerprint, KVPair, Record, RunStats, TaskId, TaskKind, Value,
};
use crate::tree::{
    self, append_fold, build_fixed, build_variable, touch_accumulator, Accumulator,
    ContractionTree, DirtySet, ExecPolicy, LeafSpec, Partial, PropagateCtx, TreeError, TreeMode,
};
use crate::udf::{CombineFn, MapFn, ReduceFn, UdfError};
use crate::workloads::Workload;

use layout::{Layout, LayoutChange, Split};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("split size must be at least 1")]
    InvalidSplitSize,
    #[error("{op} is not allowed in {mode} mode")]
    InvalidForMode { op: &'static str, mode: TreeMode },
    #[error("unknown chunk id {0}")]
    UnknownChunk(ChunkId),
    #[error("duplicate chunk id {0}")]
    DuplicateChunk(ChunkId),
    #[error("{chunks} chunks do not fit in {buckets} buckets")]
    TooManyBuckets { chunks: usize, buckets: usize },
    #[error("the engine already ran; use dynamic_update")]
    AlreadyInitialized,
    #[error("no initial run yet")]
    NotInitialized,
    #[error("memo entry missing for a clean {kind} task ({detail})")]
    MemoMiss { kind: &'static str, detail: String },
    #[error("memo file belongs to a different job")]
    JobMismatch,
    #[error("memo file has no engine ledger")]
    MissingLedger,
    #[error("corrupt engine ledger: {0}")]
    Ledger(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Udf(#[from] UdfError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Memo(#[from] MemoError),
    #[error("undecodable memo entry: {0}")]
    Decode(#[from] DecodeError),
}

impl EngineError {
    /// The run failed inside a user-defined function.
    pub fn is_udf_failure(&self) -> bool {
        matches!(
            self,
            EngineError::Udf(_) | EngineError::Tree(TreeError::Udf(_))
        )
    }

    /// The delta or input was rejected before any task ran.
    pub fn is_invalid_input(&self) -> bool {
        matches!(
            self,
            EngineError::InvalidForMode { .. }
                | EngineError::UnknownChunk(_)
                | EngineError::DuplicateChunk(_)
                | EngineError::TooManyBuckets { .. }
                | EngineError::InvalidSplitSize
        )
    }
}

/// A MapReduce job bound to a window mode.
#[derive(Clone, Debug)]
pub struct Job {
    pub map: MapFn,
    pub combine: CombineFn,
    pub reduce: ReduceFn,
    pub mode: TreeMode,
    /// Records per split.
    pub split_size: usize,
    /// Salt for variable-width coins.
    pub tree_seed: u64,
}

impl Job {
    pub fn new(workload: Workload, mode: TreeMode) -> Self {
        Job {
            map: workload.map,
            combine: workload.combine,
            reduce: workload.reduce,
            mode,
            split_size: 1,
            tree_seed: 0,
        }
    }

    pub fn with_split_size(mut self, split_size: usize) -> Self {
        self.split_size = split_size;
        self
    }

    pub fn with_tree_seed(mut self, seed: u64) -> Self {
        self.tree_seed = seed;
        self
    }

    /// Identity of everything that determines task inputs and outputs.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut buf = Vec::new();
        for fp in [self.map.fn_id(), self.combine.fn_id(), self.reduce.fn_id()] {
            buf.extend_from_slice(fp.as_bytes());
        }
        buf.extend_from_slice(self.mode.to_string().as_bytes());
        buf.push(0);
        buf.extend_from_slice(&(self.split_size as u64).to_be_bytes());
        buf.extend_from_slice(&self.tree_seed.to_be_bytes());
        Fingerprint::of(&buf)
    }

    fn validate(&self) -> Result<(), EngineError> {
        if self.split_size == 0 {
            return Err(EngineError::InvalidSplitSize);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeltaOp {
    AppendChunk(Vec<Record>),
    ReplaceChunk(ChunkId, Vec<Record>),
    DeleteChunk(ChunkId),
    SlideBucket(Vec<Record>),
}

impl DeltaOp {
    pub fn name(&self) -> &'static str {
        match self {
            DeltaOp::AppendChunk(_) => "append",
            DeltaOp::ReplaceChunk(..) => "replace",
            DeltaOp::DeleteChunk(_) => "delete",
            DeltaOp::SlideBucket(_) => "slide",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateDelta {
    pub ops: Vec<DeltaOp>,
}

impl UpdateDelta {
    pub fn new(ops: Vec<DeltaOp>) -> Self {
        UpdateDelta { ops }
    }

    pub fn noop() -> Self {
        Self::default()
    }

    /// Checks every op against the window mode's rules.
    pub fn validate(&self, mode: TreeMode) -> Result<(), EngineError> {
        self.ops
            .iter()
            .try_for_each(|op| layout::check_op(mode, op))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreshTask {
    pub kind: TaskKind,
    /// Split for Map tasks, key for the others.
    pub split: Option<u64>,
    pub key: Option<Vec<u8>>,
    pub wall: Duration,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreshReport {
    pub tasks: Vec<FreshTask>,
    /// Time spent deciding which keys are affected.
    pub identify_time: Duration,
}

impl FreshReport {
    pub fn count(&self, kind: TaskKind) -> usize {
        self.tasks.iter().filter(|t| t.kind == kind).count()
    }

    /// Sum of executed task wall times.
    pub fn task_time(&self) -> Duration {
        self.tasks.iter().map(|t| t.wall).sum()
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    /// Reduce outputs, sorted by key.
    pub output: Vec<KVPair>,
    pub stats: RunStats,
    pub fresh: FreshReport,
    /// Ids assigned to chunks added by this run.
    pub new_chunks: Vec<ChunkId>,
    pub wall: Duration,
}

#[derive(Debug, Error)]
#[error("run {failed_at} failed: {source}")]
pub struct SeriesError {
    /// Results of the runs that completed, initial run first.
    pub completed: Vec<RunResult>,
    pub failed_at: usize,
    #[source]
    pub source: EngineError,
}

#[derive(Clone, Debug, Default)]
pub struct EngineConfig {
    /// Worker threads; 0 picks the available parallelism.
    pub workers: usize,
    /// Recompute clean tasks missing from memo instead of failing.
    pub recompute_on_miss: bool,
}

/// Map output of one split, grouped by key in emission order.
#[derive(Debug)]
struct SplitOutput {
    partials: BTreeMap<Vec<u8>, Arc<Partial>>,
    pairs: u64,
}

impl SplitOutput {
    fn from_pairs(pairs: Vec<KVPair>) -> Self {
        let n = pairs.len() as u64;
        let mut grouped: BTreeMap<Vec<u8>, Vec<Value>> = BTreeMap::new();
        for pair in pairs {
            let (k, v) = pair.into_parts();
            grouped.entry(k).or_default().push(v);
        }
        SplitOutput {
            partials: grouped
                .into_iter()
                .map(|(k, vs)| (k, Arc::new(Partial::new(vs))))
                .collect(),
            pairs: n,
        }
    }
}

#[derive(Clone, Debug)]
struct KeyState {
    tree: ContractionTree,
    /// Leaf partials of fixed and variable trees, aligned with the tree's leaves.
    leaves: Vec<Arc<Partial>>,
    root_fp: Fingerprint,
    reduce_out: Arc<Vec<KVPair>>,
}

#[derive(Clone, Debug)]
struct State {
    layout: Layout,
    outputs: HashMap<u64, Arc<SplitOutput>>,
    keys: BTreeMap<Vec<u8>, KeyState>,
}

/// Per-run task bookkeeping, merged from parallel workers in a fixed order.
#[derive(Default)]
struct Tally {
    stats: RunStats,
    tasks: HashSet<TaskId>,
    fresh: Vec<FreshTask>,
}

struct MapOutcome {
    output: Arc<SplitOutput>,
    task_id: TaskId,
    fresh: Option<Duration>,
}

struct KeyOutcome {
    key: Vec<u8>,
    /// `None` when the key no longer occurs in the input.
    state: Option<KeyRoot>,
    combine_run: u64,
    combine_hit: u64,
    nonmonotonic: u64,
    task_ids: Vec<TaskId>,
    fresh_times: Vec<Duration>,
}

/// Tree, root fingerprint, leaf partials and root value source of one key.
type KeyRoot = (ContractionTree, Fingerprint, Vec<Arc<Partial>>, RootSource);
/// Per-key leaf inputs, each tagged with its split id.
type KeyInputs = Vec<(Vec<u8>, Vec<(u64, Arc<Partial>)>)>;
type ReduceOutcome = (TaskId, Arc<Vec<KVPair>>, Option<Duration>);
type ReplayTree = (Vec<u8>, ContractionTree, Vec<Arc<Partial>>, Fingerprint);

/// Where to get the root's values if Reduce has to execute.
enum RootSource {
    Values(tree::RootValue),
    Accumulator(Accumulator),
}

pub struct Engine {
    job: Job,
    memo: MemoStore,
    pool: rayon::ThreadPool,
    config: EngineConfig,
    state: Option<State>,
}

impl Engine {
    pub fn new(job: Job, config: EngineConfig) -> Result<Self, EngineError> {
        Self::with_memo(job, config, MemoStore::new())
    }

    pub fn with_memo(job: Job, config: EngineConfig, memo: MemoStore) -> Result<Self, EngineError> {
        job.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| EngineError::Pool(e.to_string()))?;
        Ok(Engine {
            job,
            memo,
            pool,
            config,
            state: None,
        })
    }

    pub fn job(&self) -> &Job {
        &self.job
    }

    pub fn memo(&self) -> &MemoStore {
        &self.memo
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    /// The current logical input, in order.
    pub fn chunks(&self) -> Vec<Chunk> {
        self.state
            .as_ref()
            .map(|s| s.layout.chunks())
            .unwrap_or_default()
    }

    /// Number of splits (Map tasks per run).
    pub fn split_count(&self) -> usize {
        self.state
            .as_ref()
            .map(|s| s.layout.splits.len())
            .unwrap_or(0)
    }

    /// The contraction tree currently held for `key`.
    pub fn tree(&self, key: &[u8]) -> Option<&ContractionTree> {
        self.state.as_ref()?.keys.get(key).map(|k| &k.tree)
    }

    pub fn initial_run(&mut self, input: Vec<Chunk>) -> Result<RunResult, EngineError> {
        if self.state.is_some() {
            return Err(EngineError::AlreadyInitialized);
        }
        let start = Instant::now();
        let (layout, change) = Layout::initial(self.job.mode, self.job.split_size, input)?;
        let empty = State {
            layout: Layout::empty(self.job.mode),
            outputs: HashMap::new(),
            keys: BTreeMap::new(),
        };
        self.execute(&empty, layout, change, start)
    }

    pub fn dynamic_update(&mut self, delta: &UpdateDelta) -> Result<RunResult, EngineError> {
        let start = Instant::now();
        let old = self.state.take().ok_or(EngineError::NotInitialized)?;
        let mut layout = old.layout.clone();
        let applied = layout.apply(self.job.mode, self.job.split_size, delta);
        let result = match applied {
            Ok(change) => self.execute(&old, layout, change, start),
            Err(e) => Err(e),
        };
        if self.state.is_none() {
            self.state = Some(old);
        }
        result
    }

    /// Runs the input and then every delta in order. Stops at the first
    /// failure, leaving the engine at the last successful run.
    pub fn run_series(
        &mut self,
        input: Vec<Chunk>,
        deltas: &[UpdateDelta],
    ) -> Result<Vec<RunResult>, SeriesError> {
        let mut completed = Vec::with_capacity(deltas.len() + 1);
        let first = self.initial_run(input).map_err(|source| SeriesError {
            completed: Vec::new(),
            failed_at: 0,
            source,
        })?;
        completed.push(first);
        for (i, delta) in deltas.iter().enumerate() {
            match self.dynamic_update(delta) {
                Ok(r) => completed.push(r),
                Err(source) => {
                    return Err(SeriesError {
                        completed,
                        failed_at: i + 1,
                        source,
                    })
                }
            }
        }
        Ok(completed)
    }

    /// Writes the memo store, with the engine ledger, to `path`.
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), EngineError> {
        let state = self.state.as_ref().ok_or(EngineError::NotInitialized)?;
        let bytes = ledger::encode(&self.job, &state.layout, &accumulators(state));
        self.memo.persist_with_ledger(path, Some(&bytes))?;
        Ok(())
    }

    /// Reopens an engine from a file written by [`Engine::persist`]. Nothing
    /// executes: the in-memory state is rebuilt from memoized outputs only.
    pub fn resume(
        job: Job,
        config: EngineConfig,
        path: impl AsRef<Path>,
    ) -> Result<Self, EngineError> {
        let (memo, ledger_bytes) = MemoStore::load_with_ledger(path)?;
        let ledger_bytes = ledger_bytes.ok_or(EngineError::MissingLedger)?;
        let restored = ledger::decode(&ledger_bytes)?;
        if restored.job_fp != job.fingerprint() {
            return Err(EngineError::JobMismatch);
        }
        let mut engine = Engine::with_memo(job, config, memo)?;
        let state = engine
            .pool
            .install(|| engine.replay(restored.layout, restored.accumulators))?;
        engine.state = Some(state);
        Ok(engine)
    }

    fn ctx(&self, policy: ExecPolicy) -> PropagateCtx<'_> {
        PropagateCtx {
            combine: &self.job.combine,
            memo: &self.memo,
            policy,
            recompute_on_miss: self.config.recompute_on_miss,
        }
    }

    fn map_task_id(&self, split: &Split) -> TaskId {
        TaskId::new(TaskKind::Map, self.job.map.fn_id(), split.input_fp)
    }

    fn reduce_task_id(&self, key: &[u8], root_fp: &Fingerprint) -> TaskId {
        let input = Fingerprint::of(&encode::encode_reduce_input(key, root_fp));
        TaskId::new(TaskKind::Reduce, self.job.reduce.fn_id(), input)
    }

    fn execute(
        &mut self,
        old: &State,
        layout: Layout,
        change: LayoutChange,
        start: Instant,
    ) -> Result<RunResult, EngineError> {
        self.memo.begin_run();
        let outcome = self.pool.install(|| self.compute(old, layout, &change));
        match outcome {
            Ok((state, mut tally, output, identify_time)) => {
                tally.stats.evicted = self.memo.end_run_evict() as u64;
                tally.stats.memo_entries = self.memo.len() as u64;
                tally.stats.distinct_tasks = tally.tasks.len() as u64;
                self.state = Some(state);
                Ok(RunResult {
                    output,
                    stats: tally.stats,
                    fresh: FreshReport {
                        tasks: tally.fresh,
                        identify_time,
                    },
                    new_chunks: change.new_chunks,
                    wall: start.elapsed(),
                })
            }
            Err(e) => {
                self.memo.abort_run();
                Err(e)
            }
        }
    }

    fn run_map(
        &self,
        split: &Split,
        task_id: TaskId,
    ) -> Result<(Vec<KVPair>, Duration), EngineError> {
        let started = Instant::now();
        let mut pairs = Vec::new();
        for record in split.records() {
            pairs.extend(self.job.map.apply(record)?);
        }
        let wall = started.elapsed();
        self.memo.put(task_id, encode::encode_kv_list(&pairs));
        Ok((pairs, wall))
    }

    fn map_split(
        &self,
        split: &Split,
        cached: Option<&Arc<SplitOutput>>,
    ) -> Result<MapOutcome, EngineError> {
        let task_id = self.map_task_id(split);
        let hit = self.memo.get(&task_id);
        if let (Some(output), Some(_)) = (cached, &hit) {
            return Ok(MapOutcome {
                output: output.clone(),
                task_id,
                fresh: None,
            });
        }
        if cached.is_some() && !self.config.recompute_on_miss {
            return Err(EngineError::MemoMiss {
                kind: "map",
                detail: format!("split {}", split.id),
            });
        }
        if let Some(entry) = hit {
            let pairs = encode::decode_kv_list(&entry.output)?;
            return Ok(MapOutcome {
                output: Arc::new(SplitOutput::from_pairs(pairs)),
                task_id,
                fresh: None,
            });
        }
        let (pairs, wall) = self.run_map(split, task_id)?;
        Ok(MapOutcome {
            output: Arc::new(SplitOutput::from_pairs(pairs)),
            task_id,
            fresh: Some(wall),
        })
    }

    #[allow(clippy::type_complexity)]
    fn compute(
        &self,
        old: &State,
        layout: Layout,
        change: &LayoutChange,
    ) -> Result<(State, Tally, Vec<KVPair>, Duration), EngineError> {
        let mut tally = Tally::default();

        // Map.
        let maps: Vec<MapOutcome> = layout
            .splits
            .par_iter()
            .map(|split| {
                let cached = if change.changed.contains(&split.id) {
                    None
                } else {
                    old.outputs.get(&split.id)
                };
                self.map_split(split, cached)
            })
            .collect::<Result<_, _>>()?;
        let mut outputs: HashMap<u64, Arc<SplitOutput>> = HashMap::with_capacity(maps.len());
        for (split, m) in layout.splits.iter().zip(maps) {
            tally.tasks.insert(m.task_id);
            tally.stats.n_m += m.output.pairs;
            match m.fresh {
                Some(wall) => {
                    tally.stats.map_run += 1;
                    tally.fresh.push(FreshTask {
                        kind: TaskKind::Map,
                        split: Some(split.id),
                        key: None,
                        wall,
                    });
                }
                None => tally.stats.map_hit += 1,
            }
            outputs.insert(split.id, m.output);
        }
        tally.stats.n_i = layout.record_count() as u64;

        // Keys whose per-split partials changed.
        let started = Instant::now();
        let mut affected: BTreeSet<Vec<u8>> = BTreeSet::new();
        for id in change.changed.iter().chain(&change.removed) {
            let before = old.outputs.get(id);
            let after = outputs.get(id);
            for (k, p) in before.iter().flat_map(|o| o.partials.iter()) {
                if after.and_then(|o| o.partials.get(k)).map(|q| q.fp) != Some(p.fp) {
                    affected.insert(k.clone());
                }
            }
            for k in after.iter().flat_map(|o| o.partials.keys()) {
                if before.is_none_or(|o| !o.partials.contains_key(k)) {
                    affected.insert(k.clone());
                }
            }
        }
        let identify = started.elapsed();

        // Trees.
        let key_inputs = self.key_inputs(&layout, &outputs, &affected, change);
        let affected_results: Vec<KeyOutcome> = key_inputs
            .into_par_iter()
            .map(|(key, leaves)| self.update_key(key, leaves, old))
            .collect::<Result<_, _>>()?;
        let unaffected: Vec<(&Vec<u8>, &KeyState)> = old
            .keys
            .iter()
            .filter(|(k, _)| !affected.contains(*k))
            .collect();
        let unaffected_results: Vec<KeyOutcome> = unaffected
            .par_iter()
            .map(|(key, ks)| self.touch_key(key, ks))
            .collect::<Result<_, _>>()?;

        let mut roots: BTreeMap<Vec<u8>, KeyRoot> = BTreeMap::new();
        let mut outcomes = affected_results;
        outcomes.extend(unaffected_results);
        outcomes.sort_by(|a, b| a.key.cmp(&b.key));
        for o in outcomes {
            tally.stats.combine_run += o.combine_run;
            tally.stats.combine_hit += o.combine_hit;
            tally.stats.nonmonotonic_combines += o.nonmonotonic;
            tally.tasks.extend(o.task_ids);
            for wall in o.fresh_times {
                tally.fresh.push(FreshTask {
                    kind: TaskKind::Combine,
                    split: None,
                    key: Some(o.key.clone()),
                    wall,
                });
            }
            if let Some(s) = o.state {
                roots.insert(o.key, s);
            }
        }
        tally.stats.combine_stages = tally.stats.combine_run + tally.stats.combine_hit;

        // Reduce.
        let roots: Vec<(Vec<u8>, KeyRoot)> = roots.into_iter().collect();
        let reduced: Vec<(TaskId, Arc<Vec<KVPair>>, Option<Duration>)> = roots
            .par_iter()
            .map(|(key, (_, root_fp, _, source))| {
                self.reduce_key(key, root_fp, source, old.keys.get(key))
            })
            .collect::<Result<_, _>>()?;
        let mut keys = BTreeMap::new();
        let mut output = Vec::new();
        for ((key, (tree, root_fp, leaves, _)), (task_id, out, fresh)) in
            roots.into_iter().zip(reduced)
        {
            tally.tasks.insert(task_id);
            match fresh {
                Some(wall) => {
                    tally.stats.reduce_run += 1;
                    tally.fresh.push(FreshTask {
                        kind: TaskKind::Reduce,
                        split: None,
                        key: Some(key.clone()),
                        wall,
                    });
                }
                None => tally.stats.reduce_hit += 1,
            }
            output.extend(out.iter().cloned());
            keys.insert(
                key,
                KeyState {
                    tree,
                    leaves,
                    root_fp,
                    reduce_out: out,
                },
            );
        }
        output.sort_by(|a, b| a.key().cmp(b.key()));
        tally.stats.n_mk = keys.len() as u64;
        tally.stats.n_o = output.len() as u64;
        Ok((
            State {
                layout,
                outputs,
                keys,
            },
            tally,
            output,
            identify,
        ))
    }

    /// The leaf partials each affected key needs.
    ///
    /// Variable: partials of every split holding the key, in input order.
    /// Fixed: one partial per slot. Append: partials of the new splits only.
    fn key_inputs(
        &self,
        layout: &Layout,
        outputs: &HashMap<u64, Arc<SplitOutput>>,
        affected: &BTreeSet<Vec<u8>>,
        change: &LayoutChange,
    ) -> KeyInputs {
        let mut per_key: BTreeMap<Vec<u8>, Vec<(u64, Arc<Partial>)>> =
            affected.iter().map(|k| (k.clone(), Vec::new())).collect();
        match self.job.mode {
            TreeMode::VariableWidth | TreeMode::AppendOnly => {
                let append = self.job.mode == TreeMode::AppendOnly;
                for split in &layout.splits {
                    if append && !change.changed.contains(&split.id) {
                        continue;
                    }
                    for (k, p) in &outputs[&split.id].partials {
                        if let Some(v) = per_key.get_mut(k) {
                            v.push((split.id, p.clone()));
                        }
                    }
                }
            }
            TreeMode::FixedWidth { .. } => {
                let ring = layout.ring.as_ref().expect("fixed layout has a ring");
                for leaves in per_key.values_mut() {
                    leaves.extend(
                        ring.slots
                            .iter()
                            .enumerate()
                            .map(|(slot, _)| (slot as u64, Partial::empty())),
                    );
                }
                for (slot, occupant) in ring.slots.iter().enumerate() {
                    let Some(id) = occupant else { continue };
                    for (k, p) in &outputs[id].partials {
                        if let Some(v) = per_key.get_mut(k) {
                            v[slot].1 = p.clone();
                        }
                    }
                }
            }
        }
        per_key.into_iter().collect()
    }

    fn update_key(
        &self,
        key: Vec<u8>,
        leaves: Vec<(u64, Arc<Partial>)>,
        old: &State,
    ) -> Result<KeyOutcome, EngineError> {
        let mut out = KeyOutcome {
            key,
            state: None,
            combine_run: 0,
            combine_hit: 0,
            nonmonotonic: 0,
            task_ids: Vec::new(),
            fresh_times: Vec::new(),
        };
        let previous = old.keys.get(&out.key).map(|k| &k.tree);
        let ctx = self.ctx(ExecPolicy::Execute);
        match self.job.mode {
            TreeMode::AppendOnly => {
                let mut tree = match previous {
                    Some(t) => t.clone(),
                    None => ContractionTree::new_append(&out.key),
                };
                for (_, partial) in &leaves {
                    let fold = append_fold(&mut tree, partial, &ctx)?;
                    if let Some(id) = fold.task_id {
                        out.task_ids.push(id);
                    }
                    if fold.fresh {
                        out.combine_run += 1;
                        out.fresh_times.push(fold.time);
                    }
                    out.nonmonotonic += u64::from(fold.nonmonotonic);
                }
                // Intermediate accumulators of a multi-chunk append are tasks
                // of this run too; they go stale at the next run.
                let acc = tree
                    .accumulator()
                    .cloned()
                    .expect("affected append keys have new partials");
                out.state = Some((
                    tree,
                    acc.payload_fp,
                    Vec::new(),
                    RootSource::Accumulator(acc),
                ));
            }
            TreeMode::VariableWidth | TreeMode::FixedWidth { .. } => {
                // The key no longer occurs anywhere in the input.
                if leaves.iter().all(|(_, p)| p.is_empty()) {
                    return Ok(out);
                }
                let mut tree = self.build_tree(&out.key, &leaves)?;
                let dirty = match previous {
                    Some(prev) => DirtySet::diff(&mut tree, prev),
                    None => DirtySet::all(&tree),
                };
                let partials = padded(&tree, leaves);
                let result = tree::propagate(&mut tree, &dirty, &partials, &ctx)?;
                out.combine_run = result.fresh;
                out.combine_hit = result.hits;
                out.nonmonotonic = result.nonmonotonic;
                out.task_ids = result.task_ids;
                out.fresh_times = result.fresh_times;
                out.state = Some((
                    tree,
                    result.root_fp,
                    partials,
                    RootSource::Values(result.root),
                ));
            }
        }
        Ok(out)
    }

    fn build_tree(
        &self,
        key: &[u8],
        leaves: &[(u64, Arc<Partial>)],
    ) -> Result<ContractionTree, TreeError> {
        match self.job.mode {
            TreeMode::FixedWidth { bucket_count } => {
                let fps: Vec<Fingerprint> = leaves.iter().map(|(_, p)| p.fp).collect();
                build_fixed(key, &fps, bucket_count)
            }
            _ => {
                let specs: Vec<LeafSpec> = leaves
                    .iter()
                    .map(|(split, p)| LeafSpec {
                        ident: Fingerprint::of(&encode::encode_leaf_ident(key, *split)),
                        payload_fp: p.fp,
                    })
                    .collect();
                build_variable(key, &specs, self.job.tree_seed)
            }
        }
    }

    /// Re-reads every task of an unchanged key so it stays live.
    fn touch_key(&self, key: &[u8], ks: &KeyState) -> Result<KeyOutcome, EngineError> {
        let mut out = KeyOutcome {
            key: key.to_vec(),
            state: None,
            combine_run: 0,
            combine_hit: 0,
            nonmonotonic: 0,
            task_ids: Vec::new(),
            fresh_times: Vec::new(),
        };
        if self.job.mode == TreeMode::AppendOnly {
            if let Some(id) = touch_accumulator(&ks.tree, &self.memo, self.job.combine.fn_id())? {
                out.combine_hit = 1;
                out.task_ids.push(id);
            }
            let acc = ks
                .tree
                .accumulator()
                .cloned()
                .expect("append key has an accumulator");
            out.state = Some((
                ks.tree.clone(),
                ks.root_fp,
                Vec::new(),
                RootSource::Accumulator(acc),
            ));
            return Ok(out);
        }
        let mut tree = ks.tree.clone();
        let dirty = DirtySet::none(&tree);
        let result = tree::propagate(
            &mut tree,
            &dirty,
            &ks.leaves,
            &self.ctx(ExecPolicy::Execute),
        )?;
        out.combine_run = result.fresh;
        out.combine_hit = result.hits;
        out.task_ids = result.task_ids;
        out.fresh_times = result.fresh_times;
        out.state = Some((
            tree,
            result.root_fp,
            ks.leaves.clone(),
            RootSource::Values(result.root),
        ));
        Ok(out)
    }

    fn reduce_key(
        &self,
        key: &[u8],
        root_fp: &Fingerprint,
        source: &RootSource,
        previous: Option<&KeyState>,
    ) -> Result<ReduceOutcome, EngineError> {
        let task_id = self.reduce_task_id(key, root_fp);
        let clean = previous.filter(|p| p.root_fp == *root_fp);
        if let Some(entry) = self.memo.get(&task_id) {
            let out = match clean {
                Some(p) => p.reduce_out.clone(),
                None => Arc::new(encode::decode_kv_list(&entry.output)?),
            };
            return Ok((task_id, out, None));
        }
        if clean.is_some() && !self.config.recompute_on_miss {
            return Err(EngineError::MemoMiss {
                kind: "reduce",
                detail: format!("key {:?}", String::from_utf8_lossy(key)),
            });
        }
        let values = match source {
            RootSource::Values(v) => v.values()?,
            RootSource::Accumulator(acc) => acc.values(&self.memo, self.job.combine.fn_id())?,
        };
        let started = Instant::now();
        let pairs = self.job.reduce.apply(key, &values)?;
        let wall = started.elapsed();
        self.memo.put(task_id, encode::encode_kv_list(&pairs));
        Ok((task_id, Arc::new(pairs), Some(wall)))
    }

    /// Rebuilds the in-memory state of a persisted run without executing or
    /// marking anything.
    fn replay(
        &self,
        layout: Layout,
        accs: Vec<(Vec<u8>, Accumulator)>,
    ) -> Result<State, EngineError> {
        let outputs: Vec<(u64, Arc<SplitOutput>)> = layout
            .splits
            .par_iter()
            .map(|split| {
                let id = self.map_task_id(split);
                let bytes = self.memo.peek(&id).ok_or_else(|| EngineError::MemoMiss {
                    kind: "map",
                    detail: format!("split {}", split.id),
                })?;
                Ok((
                    split.id,
                    Arc::new(SplitOutput::from_pairs(encode::decode_kv_list(&bytes)?)),
                ))
            })
            .collect::<Result<_, EngineError>>()?;
        let outputs: HashMap<u64, Arc<SplitOutput>> = outputs.into_iter().collect();

        let trees: Vec<ReplayTree> = if self.job.mode == TreeMode::AppendOnly {
            accs.into_iter()
                .map(|(key, acc)| {
                    let fp = acc.payload_fp;
                    let tree = ContractionTree::with_accumulator(&key, acc);
                    (key, tree, Vec::new(), fp)
                })
                .collect()
        } else {
            let all: BTreeSet<Vec<u8>> = outputs
                .values()
                .flat_map(|o| o.partials.keys().cloned())
                .collect();
            let inputs = self.key_inputs(&layout, &outputs, &all, &LayoutChange::default());
            let ctx = self.ctx(ExecPolicy::Replay);
            inputs
                .into_par_iter()
                .map(|(key, leaves)| {
                    let mut tree = self.build_tree(&key, &leaves)?;
                    let partials = padded(&tree, leaves);
                    let dirty = DirtySet::all(&tree);
                    let result = tree::propagate(&mut tree, &dirty, &partials, &ctx)?;
                    Ok((key, tree, partials, result.root_fp))
                })
                .collect::<Result<_, EngineError>>()?
        };

        let mut keys = BTreeMap::new();
        for (key, tree, leaves, root_fp) in trees {
            let id = self.reduce_task_id(&key, &root_fp);
            let bytes = self.memo.peek(&id).ok_or_else(|| EngineError::MemoMiss {
                kind: "reduce",
                detail: format!("key {:?}", String::from_utf8_lossy(&key)),
            })?;
            let out = Arc::new(encode::decode_kv_list(&bytes)?);
            keys.insert(
                key,
                KeyState {
                    tree,
                    leaves,
                    root_fp,
                    reduce_out: out,
                },
            );
        }
        Ok(State {
            layout,
            outputs,
            keys,
        })
    }
}

/// Leaf partials for `tree`, padded with empty slots up to its leaf count.
fn padded(tree: &ContractionTree, leaves: Vec<(u64, Arc<Partial>)>) -> Vec<Arc<Partial>> {
    let mut partials: Vec<Arc<Partial>> = leaves.into_iter().map(|(_, p)| p).collect();
    partials.resize(tree.leaves().len(), Partial::empty());
    partials
}

fn accumulators(state: &State) -> Vec<(Vec<u8>, Accumulator)> {
    state
        .keys
        .iter()
        .filter_map(|(k, ks)| ks.tree.accumulator().map(|a| (k.clone(), a.clone())))
        .collect()
}

#[cfg(test)]
mod tests;
