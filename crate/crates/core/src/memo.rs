//! Content-addressed task-output cache that retains only the most recent run.
//!
//! Every `get` or `put` marks the entry with the current run epoch. At the end
//! of a run [`MemoStore::end_run_evict`] sweeps everything that was not marked,
//! so after a completed run the store holds exactly the outputs of that run's
//! tasks.
//!
//! File layout, all integers big-endian:
//!
//! ```text
//! "CSLM" | version u32 | entry count u64 | entries...
//! entry: kind u8 | fn_id [32] | input_fp [32] | output len u64 | output | sha256(entry bytes before the checksum) [32]
//! ```
//!
//! An optional trailer follows the entries: `"CSLL" | len u64 | bytes |
//! sha256(bytes)`. The engine uses it to store its input ledger.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use thiserror::Error;

use crate::model::{Fingerprint, TaskId, TaskKind};

pub const MAGIC: &[u8; 4] = b"CSLM";
pub const LEDGER_MAGIC: &[u8; 4] = b"CSLL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoError {
    #[error("memo file I/O: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt memo file: {0}")]
    Corrupt(String),
}

fn corrupt(msg: impl Into<String>) -> MemoError {
    MemoError::Corrupt(msg.into())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoEntry {
    pub task_id: TaskId,
    /// Canonical encoding of the task's output.
    pub output: Arc<[u8]>,
    pub run_epoch: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub entries: u64,
    pub bytes: u64,
    pub hits: u64,
    pub misses: u64,
    pub puts: u64,
}

struct Slot {
    output: Arc<[u8]>,
    mark: AtomicU64,
}

/// Thread-safe memo store. `get`, `peek` and `put` may be called concurrently;
/// eviction takes `&mut self`.
pub struct MemoStore {
    entries: RwLock<HashMap<TaskId, Slot>>,
    epoch: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    puts: AtomicU64,
}

impl Default for MemoStore {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for MemoStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoStore")
            .field("epoch", &self.epoch())
            .field("stats", &self.stats())
            .finish()
    }
}

impl MemoStore {
    pub fn new() -> Self {
        MemoStore {
            entries: RwLock::new(HashMap::new()),
            epoch: AtomicU64::new(1),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            puts: AtomicU64::new(0),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch.load(Ordering::Acquire)
    }

    /// Returns the entry and marks it reachable in the current run.
    pub fn get(&self, task_id: &TaskId) -> Option<MemoEntry> {
        let epoch = self.epoch();
        let map = self.entries.read().unwrap();
        match map.get(task_id) {
            Some(slot) => {
                slot.mark.store(epoch, Ordering::Relaxed);
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(MemoEntry {
                    task_id: *task_id,
                    output: slot.output.clone(),
                    run_epoch: epoch,
                })
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    /// Reads an entry without marking it or touching the counters.
    pub fn peek(&self, task_id: &TaskId) -> Option<Arc<[u8]>> {
        self.entries
            .read()
            .unwrap()
            .get(task_id)
            .map(|s| s.output.clone())
    }

    pub fn contains(&self, task_id: &TaskId) -> bool {
        self.entries.read().unwrap().contains_key(task_id)
    }

    pub fn put(&self, task_id: TaskId, output: impl Into<Arc<[u8]>>) {
        let epoch = self.epoch();
        let output = output.into();
        self.puts.fetch_add(1, Ordering::Relaxed);
        let mut map = self.entries.write().unwrap();
        map.insert(
            task_id,
            Slot {
                output,
                mark: AtomicU64::new(epoch),
            },
        );
    }

    /// Resets the per-run counters. Called when a run starts.
    pub fn begin_run(&mut self) {
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
        self.puts.store(0, Ordering::Relaxed);
    }

    /// Removes every entry not reached during the run that just completed and
    /// advances the epoch. Returns the number of evicted entries.
    pub fn end_run_evict(&mut self) -> usize {
        let epoch = *self.epoch.get_mut();
        let map = self.entries.get_mut().unwrap();
        let before = map.len();
        map.retain(|_, slot| *slot.mark.get_mut() == epoch);
        *self.epoch.get_mut() += 1;
        before - map.len()
    }

    /// Abandons a failed run: nothing is evicted, and marks made during the
    /// run no longer count as reachable for the next one.
    pub fn abort_run(&mut self) {
        *self.epoch.get_mut() += 1;
    }

    pub fn stats(&self) -> StoreStats {
        let map = self.entries.read().unwrap();
        StoreStats {
            entries: map.len() as u64,
            bytes: map.values().map(|s| s.output.len() as u64).sum(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            puts: self.puts.load(Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries sorted by task id.
    pub fn entries(&self) -> Vec<MemoEntry> {
        let map = self.entries.read().unwrap();
        let mut out: Vec<MemoEntry> = map
            .iter()
            .map(|(id, slot)| MemoEntry {
                task_id: *id,
                output: slot.output.clone(),
                run_epoch: slot.mark.load(Ordering::Relaxed),
            })
            .collect();
        out.sort_by_key(|e| e.task_id);
        out
    }

    /// Serializes the store (and an optional ledger trailer) in the file format.
    pub fn to_bytes(&self, ledger: Option<&[u8]>) -> Vec<u8> {
        let entries = self.entries();
        let mut out =
            Vec::with_capacity(16 + entries.iter().map(|e| 113 + e.output.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_be_bytes());
        out.extend_from_slice(&(entries.len() as u64).to_be_bytes());
        for e in &entries {
            let start = out.len();
            out.push(e.task_id.kind as u8);
            out.extend_from_slice(e.task_id.fn_id.as_bytes());
            out.extend_from_slice(e.task_id.input_fp.as_bytes());
            out.extend_from_slice(&(e.output.len() as u64).to_be_bytes());
            out.extend_from_slice(&e.output);
            let sum = Fingerprint::of(&out[start..]);
            out.extend_from_slice(sum.as_bytes());
        }
        if let Some(ledger) = ledger {
            out.extend_from_slice(LEDGER_MAGIC);
            out.extend_from_slice(&(ledger.len() as u64).to_be_bytes());
            out.extend_from_slice(ledger);
            out.extend_from_slice(Fingerprint::of(ledger).as_bytes());
        }
        out
    }

    /// Parses a file image. Nothing is returned unless the whole image is valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<(MemoStore, Option<Vec<u8>>), MemoError> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = cur.u64()?;
        let mut map = HashMap::new();
        for i in 0..count {
            let start = cur.pos;
            let kind = TaskKind::from_u8(cur.u8()?)
                .ok_or_else(|| corrupt(format!("entry {i}: bad task kind")))?;
            let fn_id = cur.fingerprint()?;
            let input_fp = cur.fingerprint()?;
            let len = usize::try_from(cur.u64()?).map_err(|_| corrupt("entry too large"))?;
            let output: Arc<[u8]> = cur.take(len)?.into();
            let expected = Fingerprint::of(&bytes[start..cur.pos]);
            if cur.fingerprint()? != expected {
                return Err(corrupt(format!("entry {i}: checksum mismatch")));
            }
            let id = TaskId::new(kind, fn_id, input_fp);
            // Loaded entries belong to the previous run: mark 0 is never current.
            if map
                .insert(
                    id,
                    Slot {
                        output,
                        mark: AtomicU64::new(0),
                    },
                )
                .is_some()
            {
                return Err(corrupt(format!("entry {i}: duplicate task id")));
            }
        }
        let ledger = if cur.remaining() == 0 {
            None
        } else {
            if cur.take(4)? != LEDGER_MAGIC {
                return Err(corrupt("trailing bytes after entries"));
            }
            let len = usize::try_from(cur.u64()?).map_err(|_| corrupt("ledger too large"))?;
            let body = cur.take(len)?.to_vec();
            if cur.fingerprint()? != Fingerprint::of(&body) {
                return Err(corrupt("ledger checksum mismatch"));
            }
            if cur.remaining() != 0 {
                return Err(corrupt("trailing bytes after ledger"));
            }
            Some(body)
        };
        let store = MemoStore::new();
        *store.entries.write().unwrap() = map;
        Ok((store, ledger))
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), MemoError> {
        self.persist_with_ledger(path, None)
    }

    /// Writes the file atomically (temporary file + rename).
    pub fn persist_with_ledger(
        &self,
        path: impl AsRef<Path>,
        ledger: Option<&[u8]>,
    ) -> Result<(), MemoError> {
        let path = path.as_ref();
        let bytes = self.to_bytes(ledger);
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MemoStore, MemoError> {
        Ok(Self::load_with_ledger(path)?.0)
    }

    pub fn load_with_ledger(
        path: impl AsRef<Path>,
    ) -> Result<(MemoStore, Option<Vec<u8>>), MemoError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MemoError> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!("truncated at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, MemoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, MemoError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, MemoError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fingerprint(&mut self) -> Result<Fingerprint, MemoError> {
        Ok(Fingerprint::from_bytes(self.take(32)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fingerprint;

    fn tid(i: u32) -> TaskId {
        TaskId::new(
            TaskKind::Combine,
            fingerprint(b"fn"),
            fingerprint(&i.to_be_bytes()),
        )
    }

    #[test]
    fn get_after_put_round_trips() {
        let store = MemoStore::new();
        assert!(store.get(&tid(1)).is_none());
        store.put(tid(1), b"out".to_vec());
        let e = store.get(&tid(1)).unwrap();
        assert_eq!(&*e.output, b"out");
        let s = store.stats();
        assert_eq!((s.hits, s.misses, s.puts), (1, 1, 1));
    }

    #[test]
    fn put_is_idempotent() {
        let store = MemoStore::new();
        store.put(tid(1), b"o".to_vec());
        store.put(tid(1), b"o".to_vec());
        assert_eq!(store.len(), 1);
        for i in 0..1000 {
            store.put(tid(i), b"o".to_vec());
        }
        assert_eq!(store.len(), 1000);
    }

    #[test]
    fn eviction_keeps_only_the_latest_run() {
        let mut store = MemoStore::new();
        for i in 0..12 {
            store.put(tid(i), vec![i as u8]);
        }
        assert_eq!(store.end_run_evict(), 0);
        store.begin_run();
        for i in 0..10 {
            assert!(store.get(&tid(i)).is_some());
        }
        assert_eq!(store.end_run_evict(), 2);
        assert_eq!(store.len(), 10);
        // identical run: nothing evicted
        for i in 0..10 {
            store.get(&tid(i)).unwrap();
        }
        assert_eq!(store.end_run_evict(), 0);
    }

    #[test]
    fn peek_does_not_mark() {
        let mut store = MemoStore::new();
        store.put(tid(1), b"x".to_vec());
        store.end_run_evict();
        assert!(store.peek(&tid(1)).is_some());
        assert_eq!(store.stats().hits, 0);
        assert_eq!(store.end_run_evict(), 1);
    }

    #[test]
    fn aborted_run_marks_do_not_survive() {
        let mut store = MemoStore::new();
        store.put(tid(1), b"x".to_vec());
        store.put(tid(2), b"y".to_vec());
        store.end_run_evict();
        store.get(&tid(1));
        store.abort_run();
        store.get(&tid(2));
        assert_eq!(store.end_run_evict(), 1);
        assert!(store.contains(&tid(2)));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memo.bin");
        let store = MemoStore::new();
        for i in 0..100 {
            store.put(tid(i), format!("output-{i}").into_bytes());
        }
        store.persist_with_ledger(&path, Some(b"ledger")).unwrap();
        let (loaded, ledger) = MemoStore::load_with_ledger(&path).unwrap();
        assert_eq!(ledger.as_deref(), Some(&b"ledger"[..]));
        assert_eq!(loaded.len(), 100);
        for (a, b) in store.entries().iter().zip(loaded.entries()) {
            assert_eq!((a.task_id, &a.output), (b.task_id, &b.output));
        }
        assert_eq!(loaded.to_bytes(Some(b"ledger")), fs::read(&path).unwrap());
    }

    #[test]
    fn empty_store_layout() {
        let bytes = MemoStore::new().to_bytes(None);
        assert_eq!(bytes, b"CSLM\0\0\0\x01\0\0\0\0\0\0\0\0");
        let (s, ledger) = MemoStore::from_bytes(&bytes).unwrap();
        assert!(s.is_empty() && ledger.is_none());
    }

    #[test]
    fn entry_layout() {
        let store = MemoStore::new();
        store.put(tid(7), b"ab".to_vec());
        let bytes = store.to_bytes(None);
        let entry = &bytes[16..];
        assert_eq!(entry[0], TaskKind::Combine as u8);
        assert_eq!(&entry[1..33], fingerprint(b"fn").as_bytes());
        assert_eq!(&entry[33..65], fingerprint(&7u32.to_be_bytes()).as_bytes());
        assert_eq!(&entry[65..73], &2u64.to_be_bytes());
        assert_eq!(&entry[73..75], b"ab");
        assert_eq!(&entry[75..107], fingerprint(&entry[..75]).as_bytes());
        assert_eq!(entry.len(), 107);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let store = MemoStore::new();
        for i in 0..3 {
            store.put(tid(i), vec![1, 2, 3]);
        }
        let bytes = store.to_bytes(Some(b"L"));
        let entries_end = store.to_bytes(None).len();
        for cut in 0..bytes.len() {
            let parsed = MemoStore::from_bytes(&bytes[..cut]);
            if cut == entries_end {
                // Losing the whole trailer leaves a valid ledger-less file;
                // callers that need the ledger must check for it.
                assert!(matches!(parsed, Ok((_, None))));
                continue;
            }
            assert!(
                matches!(parsed, Err(MemoError::Corrupt(_))),
                "cut at {cut} accepted"
            );
        }
    }

    #[test]
    fn flipped_bit_is_rejected() {
        let store = MemoStore::new();
        store.put(tid(1), vec![9; 10]);
        let mut bytes = store.to_bytes(None);
        bytes[16 + 73 + 4] ^= 1;
        assert!(matches!(
            MemoStore::from_bytes(&bytes),
            Err(MemoError::Corrupt(_))
        ));
    }

    #[test]
    fn concurrent_puts_and_gets() {
        let store = MemoStore::new();
        std::thread::scope(|s| {
            for t in 0..8u32 {
                let store = &store;
                s.spawn(move || {
                    for i in 0..500 {
                        store.put(tid(t * 1000 + i), vec![t as u8]);
                        assert!(store.get(&tid(t * 1000 + i)).is_some());
                    }
                });
            }
        });
        let s = store.stats();
        assert_eq!((s.entries, s.hits, s.puts), (4000, 4000, 4000));
    }
}
