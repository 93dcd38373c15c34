//! C interface to the contract-slide engine.
//!
//! Every call returns a [`CsStatus`]. On failure a description is kept for the
//! calling thread and can be read with [`cs_last_error`]. Engines are opaque
//! handles created by [`cs_engine_new`] or [`cs_engine_resume`] and released
//! with [`cs_engine_free`]. Byte views handed out by the engine stay valid
//! until the next run on that engine or until it is freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use contract_slide::engine::{
    DeltaOp, Engine, EngineConfig, EngineError, Job, RunResult, UpdateDelta,
};
use contract_slide::memo::MemoError;
use contract_slide::{BuiltinWorkload, Chunk, ChunkId, KVPair, Record, RunStats, TreeMode};

pub const CS_WORKLOAD_WORDCOUNT: u32 = 0;
pub const CS_WORKLOAD_WINDOWED_SUM: u32 = 1;
pub const CS_WORKLOAD_HISTOGRAM: u32 = 2;

pub const CS_MODE_APPEND: u32 = 0;
pub const CS_MODE_FIXED: u32 = 1;
pub const CS_MODE_VARIABLE: u32 = 2;

pub const CS_OP_APPEND: u32 = 0;
pub const CS_OP_REPLACE: u32 = 1;
pub const CS_OP_DELETE: u32 = 2;
pub const CS_OP_SLIDE: u32 = 3;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    /// The delta or input breaks the window mode's rules or names an
    /// unknown chunk. The engine state is unchanged.
    InvalidDelta = 3,
    UdfFailure = 4,
    CorruptMemo = 5,
    JobMismatch = 6,
    Io = 7,
    /// Initial run called twice, or an update before the initial run.
    BadState = 8,
    OutOfRange = 9,
    Internal = 10,
}

/// Opaque engine handle.
pub struct CsEngine {
    engine: Engine,
    output: Vec<KVPair>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CsJobConfig {
    /// One of the `CS_WORKLOAD_*` values.
    pub workload: u32,
    /// One of the `CS_MODE_*` values.
    pub mode: u32,
    /// Window size for fixed mode; ignored otherwise.
    pub buckets: usize,
    /// Records per Map split, at least 1.
    pub split_size: usize,
    pub tree_seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

/// A borrowed byte string.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CsBytes {
    pub ptr: *const u8,
    pub len: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CsChunk {
    pub id: u64,
    pub records: *const CsBytes,
    pub record_count: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CsOp {
    /// One of the `CS_OP_*` values.
    pub kind: u32,
    /// Target of replace and delete.
    pub chunk_id: u64,
    /// Records for append, replace and slide.
    pub records: *const CsBytes,
    pub record_count: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsRunStats {
    pub n_i: u64,
    pub n_m: u64,
    pub n_mk: u64,
    pub n_o: u64,
    pub map_run: u64,
    pub map_hit: u64,
    pub combine_run: u64,
    pub combine_hit: u64,
    pub reduce_run: u64,
    pub reduce_hit: u64,
    pub combine_stages: u64,
    pub distinct_tasks: u64,
    pub memo_entries: u64,
    pub evicted: u64,
}

impl From<&RunStats> for CsRunStats {
    fn from(s: &RunStats) -> Self {
        CsRunStats {
            n_i: s.n_i,
            n_m: s.n_m,
            n_mk: s.n_mk,
            n_o: s.n_o,
            map_run: s.map_run,
            map_hit: s.map_hit,
            combine_run: s.combine_run,
            combine_hit: s.combine_hit,
            reduce_run: s.reduce_run,
            reduce_hit: s.reduce_hit,
            combine_stages: s.combine_stages,
            distinct_tasks: s.distinct_tasks,
            memo_entries: s.memo_entries,
            evicted: s.evicted,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(CsStatus, String);

impl Failure {
    fn new(status: CsStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let status = if e.is_invalid_input() {
            CsStatus::InvalidDelta
        } else if e.is_udf_failure() {
            CsStatus::UdfFailure
        } else {
            match &e {
                EngineError::Memo(MemoError::Io(_)) => CsStatus::Io,
                EngineError::Memo(MemoError::Corrupt(_))
                | EngineError::MissingLedger
                | EngineError::Ledger(_)
                | EngineError::Decode(_) => CsStatus::CorruptMemo,
                EngineError::JobMismatch => CsStatus::JobMismatch,
                EngineError::AlreadyInitialized | EngineError::NotInitialized => CsStatus::BadState,
                _ => CsStatus::Internal,
            }
        };
        Failure(status, e.to_string())
    }
}

/// Runs `f`, recording any failure or panic for [`cs_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CsStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside contract-slide");
            CsStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass pointers that are either null or valid for reads.
    unsafe { p.as_ref() }
        .ok_or_else(|| Failure::new(CsStatus::NullArgument, format!("{name} is null")))
}

fn engine_mut<'a>(p: *mut CsEngine) -> Result<&'a mut CsEngine, Failure> {
    // SAFETY: a non-null handle came from cs_engine_new or cs_engine_resume.
    unsafe { p.as_mut() }.ok_or_else(|| Failure::new(CsStatus::NullArgument, "engine is null"))
}

/// # Safety
/// `ptr` must be valid for `len` reads of `T` unless `len` is 0.
unsafe fn view<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::new(
            CsStatus::NullArgument,
            format!("{name} is null"),
        ));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

/// # Safety
/// As for [`view`], for the array and every byte string in it.
unsafe fn records(ptr: *const CsBytes, len: usize) -> Result<Vec<Record>, Failure> {
    view(ptr, len, "records")?
        .iter()
        .map(|b| {
            let bytes = view(b.ptr, b.len, "record bytes")?;
            Record::new(bytes.to_vec())
                .map_err(|e| Failure::new(CsStatus::InvalidArgument, e.to_string()))
        })
        .collect()
}

fn job(cfg: &CsJobConfig) -> Result<(Job, EngineConfig), Failure> {
    let bad = |msg: String| Failure::new(CsStatus::InvalidArgument, msg);
    let workload = match cfg.workload {
        CS_WORKLOAD_WORDCOUNT => BuiltinWorkload::WordCount,
        CS_WORKLOAD_WINDOWED_SUM => BuiltinWorkload::WindowedSum,
        CS_WORKLOAD_HISTOGRAM => BuiltinWorkload::Histogram,
        other => return Err(bad(format!("unknown workload {other}"))),
    };
    let mode = match cfg.mode {
        CS_MODE_APPEND => TreeMode::AppendOnly,
        CS_MODE_FIXED => TreeMode::fixed(cfg.buckets).map_err(|e| bad(e.to_string()))?,
        CS_MODE_VARIABLE => TreeMode::VariableWidth,
        other => return Err(bad(format!("unknown mode {other}"))),
    };
    if cfg.split_size == 0 {
        return Err(bad("split_size must be at least 1".into()));
    }
    let job = Job::new(workload.workload(), mode)
        .with_split_size(cfg.split_size)
        .with_tree_seed(cfg.tree_seed);
    let config = EngineConfig {
        workers: cfg.workers,
        ..EngineConfig::default()
    };
    Ok((job, config))
}

fn path_arg(path: *const c_char) -> Result<String, Failure> {
    if path.is_null() {
        return Err(Failure::new(CsStatus::NullArgument, "path is null"));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    let s = unsafe { CStr::from_ptr(path) };
    s.to_str()
        .map(str::to_string)
        .map_err(|_| Failure::new(CsStatus::InvalidArgument, "path is not UTF-8"))
}

fn finish(handle: &mut CsEngine, r: RunResult, stats_out: *mut CsRunStats) {
    // SAFETY: null or valid for writes per the API contract.
    if let Some(out) = unsafe { stats_out.as_mut() } {
        *out = CsRunStats::from(&r.stats);
    }
    handle.output = r.output;
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Description of the last failed call on this thread, or NULL after a
/// success. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn cs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates an engine with an empty memo store.
///
/// # Safety
/// `config` must be valid for reads and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_new(
    config: *const CsJobConfig,
    out: *mut *mut CsEngine,
) -> CsStatus {
    guard(|| {
        let cfg = non_null(config, "config")?;
        if out.is_null() {
            return Err(Failure::new(CsStatus::NullArgument, "out is null"));
        }
        let (job, config) = job(cfg)?;
        let engine = Engine::new(job, config)?;
        *out = Box::into_raw(Box::new(CsEngine {
            engine,
            output: Vec::new(),
        }));
        Ok(())
    })
}

/// Restores an engine from a file written by [`cs_engine_persist`] with the
/// same job configuration. Run a no-op update to recover the output.
///
/// # Safety
/// `config` must be valid for reads, `path` a NUL-terminated string and `out`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_resume(
    config: *const CsJobConfig,
    path: *const c_char,
    out: *mut *mut CsEngine,
) -> CsStatus {
    guard(|| {
        let cfg = non_null(config, "config")?;
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(Failure::new(CsStatus::NullArgument, "out is null"));
        }
        let (job, config) = job(cfg)?;
        let engine = Engine::resume(job, config, path)?;
        *out = Box::into_raw(Box::new(CsEngine {
            engine,
            output: Vec::new(),
        }));
        Ok(())
    })
}

/// Releases an engine. NULL is ignored.
///
/// # Safety
/// `engine` must be NULL or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_free(engine: *mut CsEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Runs the job on its initial input. `stats_out` may be NULL.
///
/// # Safety
/// `chunks` must hold `chunk_count` valid chunks whose record arrays and
/// bytes are readable; `stats_out` must be NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_initial_run(
    engine: *mut CsEngine,
    chunks: *const CsChunk,
    chunk_count: usize,
    stats_out: *mut CsRunStats,
) -> CsStatus {
    guard(|| {
        let handle = engine_mut(engine)?;
        let input = view(chunks, chunk_count, "chunks")?
            .iter()
            .map(|c| Ok(Chunk::new(c.id, records(c.records, c.record_count)?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        let r = handle.engine.initial_run(input)?;
        finish(handle, r, stats_out);
        Ok(())
    })
}

/// Applies one delta made of `op_count` ops. With no ops this re-runs the
/// current input. `stats_out` may be NULL.
///
/// # Safety
/// `ops` must hold `op_count` valid ops whose record arrays and bytes are
/// readable; `stats_out` must be NULL or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_update(
    engine: *mut CsEngine,
    ops: *const CsOp,
    op_count: usize,
    stats_out: *mut CsRunStats,
) -> CsStatus {
    guard(|| {
        let handle = engine_mut(engine)?;
        let ops = view(ops, op_count, "ops")?
            .iter()
            .map(|op| {
                let id = ChunkId(op.chunk_id);
                Ok(match op.kind {
                    CS_OP_APPEND => DeltaOp::AppendChunk(records(op.records, op.record_count)?),
                    CS_OP_REPLACE => {
                        DeltaOp::ReplaceChunk(id, records(op.records, op.record_count)?)
                    }
                    CS_OP_DELETE => DeltaOp::DeleteChunk(id),
                    CS_OP_SLIDE => DeltaOp::SlideBucket(records(op.records, op.record_count)?),
                    other => {
                        return Err(Failure::new(
                            CsStatus::InvalidArgument,
                            format!("unknown op kind {other}"),
                        ))
                    }
                })
            })
            .collect::<Result<Vec<_>, Failure>>()?;
        let r = handle.engine.dynamic_update(&UpdateDelta::new(ops))?;
        finish(handle, r, stats_out);
        Ok(())
    })
}

/// Writes the memo store and input layout to `path`.
///
/// # Safety
/// `engine` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_persist(
    engine: *const CsEngine,
    path: *const c_char,
) -> CsStatus {
    guard(|| {
        let handle = non_null(engine, "engine")?;
        let path = path_arg(path)?;
        handle.engine.persist(path)?;
        Ok(())
    })
}

/// Number of pairs in the last run's output, sorted by key. 0 for NULL.
///
/// # Safety
/// `engine` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_output_len(engine: *const CsEngine) -> usize {
    engine.as_ref().map_or(0, |h| h.output.len())
}

/// Borrows output pair `index`.
///
/// # Safety
/// `engine` must be a live handle; `key` and `value` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_output_pair(
    engine: *const CsEngine,
    index: usize,
    key: *mut CsBytes,
    value: *mut CsBytes,
) -> CsStatus {
    guard(|| {
        let handle = non_null(engine, "engine")?;
        if key.is_null() || value.is_null() {
            return Err(Failure::new(CsStatus::NullArgument, "key or value is null"));
        }
        let pair = handle.output.get(index).ok_or_else(|| {
            Failure::new(
                CsStatus::OutOfRange,
                format!("pair {index} of {}", handle.output.len()),
            )
        })?;
        *key = CsBytes {
            ptr: pair.key().as_ptr(),
            len: pair.key().len(),
        };
        *value = CsBytes {
            ptr: pair.value().as_ptr(),
            len: pair.value().len(),
        };
        Ok(())
    })
}

/// Number of chunks in the current window. 0 for NULL.
///
/// # Safety
/// `engine` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_chunk_count(engine: *const CsEngine) -> usize {
    engine.as_ref().map_or(0, |h| h.engine.chunks().len())
}

/// Fills `ids` with up to `capacity` chunk ids, oldest first, and stores the
/// number written in `written`.
///
/// # Safety
/// `engine` must be a live handle, `ids` valid for `capacity` writes and
/// `written` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn cs_engine_chunk_ids(
    engine: *const CsEngine,
    ids: *mut u64,
    capacity: usize,
    written: *mut usize,
) -> CsStatus {
    guard(|| {
        let handle = non_null(engine, "engine")?;
        if written.is_null() || (ids.is_null() && capacity > 0) {
            return Err(Failure::new(
                CsStatus::NullArgument,
                "ids or written is null",
            ));
        }
        let chunks = handle.engine.chunks();
        let n = chunks.len().min(capacity);
        for (i, c) in chunks.iter().take(n).enumerate() {
            *ids.add(i) = c.id.0;
        }
        *written = n;
        Ok(())
    })
}
