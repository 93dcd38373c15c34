//! The engine's view of the current input: chunks grouped into persistent
//! splits, in logical order, plus the slot ring used by fixed-width windows.

use std::collections::HashSet;

use super::{DeltaOp, EngineError, UpdateDelta};
use crate::encode;
use crate::model::{Chunk, ChunkId, Fingerprint, Record};
use crate::tree::TreeMode;

#[derive(Clone, Debug)]
pub(crate) struct Split {
    pub id: u64,
    pub chunks: Vec<(Chunk, Fingerprint)>,
    /// Fingerprint of the split's Map input.
    pub input_fp: Fingerprint,
}

impl Split {
    fn new(id: u64, chunks: Vec<(Chunk, Fingerprint)>) -> Self {
        let mut split = Split {
            id,
            chunks,
            input_fp: Fingerprint::from_bytes([0; 32]),
        };
        split.refresh();
        split
    }

    fn refresh(&mut self) {
        let fps: Vec<Fingerprint> = self.chunks.iter().map(|(_, fp)| *fp).collect();
        self.input_fp = Fingerprint::of(&encode::encode_split(&fps));
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.chunks.iter().flat_map(|(c, _)| c.records.iter())
    }

    pub fn record_count(&self) -> usize {
        self.chunks.iter().map(|(c, _)| c.records.len()).sum()
    }
}

/// Slot assignment for fixed-width windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Ring {
    /// Split id occupying each slot.
    pub slots: Vec<Option<u64>>,
}

impl Ring {
    fn new(bucket_count: usize) -> Self {
        Ring {
            slots: vec![None; bucket_count],
        }
    }

    fn slot_of(&self, split: u64) -> Option<usize> {
        self.slots.iter().position(|s| *s == Some(split))
    }

    fn free_slot(&self) -> Option<usize> {
        self.slots.iter().position(Option::is_none)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    /// Splits in logical input order. In fixed mode this is also age order.
    pub splits: Vec<Split>,
    pub ring: Option<Ring>,
    pub next_chunk: u64,
    pub next_split: u64,
}

/// What a delta did to the split set.
#[derive(Debug, Default)]
pub(crate) struct LayoutChange {
    /// Splits that are new or whose contents changed.
    pub changed: HashSet<u64>,
    /// Splits that no longer exist.
    pub removed: HashSet<u64>,
    pub new_chunks: Vec<ChunkId>,
}

fn chunk_entry(chunk: Chunk) -> (Chunk, Fingerprint) {
    let fp = chunk.content_fingerprint();
    (chunk, fp)
}

impl Layout {
    pub fn empty(mode: TreeMode) -> Self {
        Layout {
            splits: Vec::new(),
            ring: match mode {
                TreeMode::FixedWidth { bucket_count } => Some(Ring::new(bucket_count)),
                _ => None,
            },
            next_chunk: 0,
            next_split: 0,
        }
    }

    /// Lays out the input of an initial run.
    pub fn initial(
        mode: TreeMode,
        split_size: usize,
        input: Vec<Chunk>,
    ) -> Result<(Self, LayoutChange), EngineError> {
        let mut seen = HashSet::new();
        for c in &input {
            if !seen.insert(c.id) {
                return Err(EngineError::DuplicateChunk(c.id));
            }
        }
        let mut layout = Layout::empty(mode);
        layout.next_chunk = input.iter().map(|c| c.id.0 + 1).max().unwrap_or(0);
        let mut change = LayoutChange::default();
        match mode {
            TreeMode::FixedWidth { bucket_count } => {
                if input.len() > bucket_count {
                    return Err(EngineError::TooManyBuckets {
                        chunks: input.len(),
                        buckets: bucket_count,
                    });
                }
                for chunk in input {
                    layout.push_bucket(chunk, &mut change);
                }
            }
            _ => layout.push_batch(input, split_size, &mut change),
        }
        Ok((layout, change))
    }

    fn fresh_split_id(&mut self) -> u64 {
        let id = self.next_split;
        self.next_split += 1;
        id
    }

    fn fresh_chunk(&mut self, records: Vec<Record>) -> Chunk {
        let id = self.next_chunk;
        self.next_chunk += 1;
        Chunk::new(id, records)
    }

    /// Appends chunks as new splits, filled greedily up to `split_size` records.
    fn push_batch(&mut self, chunks: Vec<Chunk>, split_size: usize, change: &mut LayoutChange) {
        let mut current: Vec<(Chunk, Fingerprint)> = Vec::new();
        let mut records = 0;
        for chunk in chunks {
            records += chunk.records.len();
            current.push(chunk_entry(chunk));
            if records >= split_size {
                self.close_split(std::mem::take(&mut current), change);
                records = 0;
            }
        }
        if !current.is_empty() {
            self.close_split(current, change);
        }
    }

    fn close_split(&mut self, chunks: Vec<(Chunk, Fingerprint)>, change: &mut LayoutChange) {
        let id = self.fresh_split_id();
        change.changed.insert(id);
        self.splits.push(Split::new(id, chunks));
    }

    /// Adds a one-chunk bucket to the window, evicting the oldest bucket when
    /// every slot is taken.
    fn push_bucket(&mut self, chunk: Chunk, change: &mut LayoutChange) {
        let ring = self.ring.as_ref().expect("fixed layout has a ring");
        let slot = match ring.free_slot() {
            Some(slot) => slot,
            None => {
                let oldest = self.splits.remove(0);
                change.removed.insert(oldest.id);
                change.changed.remove(&oldest.id);
                ring.slot_of(oldest.id).expect("oldest bucket has a slot")
            }
        };
        let id = self.fresh_split_id();
        change.changed.insert(id);
        self.splits.push(Split::new(id, vec![chunk_entry(chunk)]));
        self.ring.as_mut().unwrap().slots[slot] = Some(id);
    }

    fn locate(&self, chunk: ChunkId) -> Result<(usize, usize), EngineError> {
        for (si, split) in self.splits.iter().enumerate() {
            if let Some(ci) = split.chunks.iter().position(|(c, _)| c.id == chunk) {
                return Ok((si, ci));
            }
        }
        Err(EngineError::UnknownChunk(chunk))
    }

    /// Applies a delta in place. On error the layout may be partially
    /// modified; callers apply deltas to a copy.
    pub fn apply(
        &mut self,
        mode: TreeMode,
        split_size: usize,
        delta: &UpdateDelta,
    ) -> Result<LayoutChange, EngineError> {
        let mut change = LayoutChange::default();
        let mut pending: Vec<Chunk> = Vec::new();
        for op in &delta.ops {
            check_op(mode, op)?;
            if !matches!(op, DeltaOp::AppendChunk(_)) && !pending.is_empty() {
                self.push_batch(std::mem::take(&mut pending), split_size, &mut change);
            }
            match op {
                DeltaOp::AppendChunk(records) => {
                    let chunk = self.fresh_chunk(records.clone());
                    change.new_chunks.push(chunk.id);
                    pending.push(chunk);
                }
                DeltaOp::ReplaceChunk(id, records) => {
                    let (si, ci) = self.locate(*id)?;
                    let split = &mut self.splits[si];
                    split.chunks[ci] = chunk_entry(Chunk::new(id.0, records.clone()));
                    let before = split.input_fp;
                    split.refresh();
                    if split.input_fp != before {
                        change.changed.insert(split.id);
                    }
                }
                DeltaOp::DeleteChunk(id) => {
                    let (si, ci) = self.locate(*id)?;
                    let split = &mut self.splits[si];
                    split.chunks.remove(ci);
                    if split.chunks.is_empty() {
                        let gone = self.splits.remove(si);
                        change.changed.remove(&gone.id);
                        change.removed.insert(gone.id);
                        if let Some(ring) = self.ring.as_mut() {
                            if let Some(slot) = ring.slot_of(gone.id) {
                                ring.slots[slot] = None;
                            }
                        }
                    } else {
                        split.refresh();
                        change.changed.insert(split.id);
                    }
                }
                DeltaOp::SlideBucket(records) => {
                    let chunk = self.fresh_chunk(records.clone());
                    change.new_chunks.push(chunk.id);
                    self.push_bucket(chunk, &mut change);
                }
            }
        }
        if !pending.is_empty() {
            self.push_batch(pending, split_size, &mut change);
        }
        Ok(change)
    }

    pub fn chunks(&self) -> Vec<Chunk> {
        self.splits
            .iter()
            .flat_map(|s| s.chunks.iter().map(|(c, _)| c.clone()))
            .collect()
    }

    pub fn record_count(&self) -> usize {
        self.splits.iter().map(Split::record_count).sum()
    }

    /// Rebuilds a layout from its persisted parts.
    pub fn restore(
        splits: Vec<(u64, Vec<Chunk>)>,
        ring: Option<Ring>,
        next_chunk: u64,
        next_split: u64,
    ) -> Self {
        Layout {
            splits: splits
                .into_iter()
                .map(|(id, chunks)| Split::new(id, chunks.into_iter().map(chunk_entry).collect()))
                .collect(),
            ring,
            next_chunk,
            next_split,
        }
    }
}

impl Ring {
    pub(crate) fn from_slots(slots: Vec<Option<u64>>) -> Self {
        Ring { slots }
    }
}

pub(crate) fn check_op(mode: TreeMode, op: &DeltaOp) -> Result<(), EngineError> {
    let allowed = match (mode, op) {
        (TreeMode::AppendOnly, DeltaOp::AppendChunk(_)) => true,
        (TreeMode::AppendOnly, _) => false,
        (TreeMode::FixedWidth { .. }, DeltaOp::AppendChunk(_)) => false,
        (TreeMode::FixedWidth { .. }, _) => true,
        (TreeMode::VariableWidth, DeltaOp::SlideBucket(_)) => false,
        (TreeMode::VariableWidth, _) => true,
    };
    if allowed {
        Ok(())
    } else {
        Err(EngineError::InvalidForMode {
            op: op.name(),
            mode,
        })
    }
}
