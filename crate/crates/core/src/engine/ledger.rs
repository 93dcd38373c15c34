//! The engine ledger: everything besides memoized outputs that a persisted
//! engine needs to resume. Stored as the memo file's trailer.
//!
//! ```text
//! version u32 | job fp | next chunk u64 | next split u64
//! | split count u64 | per split: id u64, chunk count u64, per chunk: id u64, canonical records
//! | ring flag u8 [| slot count u64 | per slot: flag u8, split id u64]
//! | accumulator count u64 | per accumulator: key, payload fp, partials u64, source
//! ```
//!
//! Variable-length fields are u32-length-prefixed; fingerprints are 32-byte
//! fields.

use std::sync::Arc;

use super::layout::{Layout, Ring};
use super::{EngineError, Job};
use crate::encode::{self, Reader};
use crate::model::{Chunk, Fingerprint};
use crate::tree::{AccSource, Accumulator, Partial};

const VERSION: u32 = 1;

pub(crate) struct Restored {
    pub job_fp: Fingerprint,
    pub layout: Layout,
    pub accumulators: Vec<(Vec<u8>, Accumulator)>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

pub(crate) fn encode(job: &Job, layout: &Layout, accs: &[(Vec<u8>, Accumulator)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&VERSION.to_be_bytes());
    put_field(&mut out, job.fingerprint().as_bytes());
    put_u64(&mut out, layout.next_chunk);
    put_u64(&mut out, layout.next_split);
    put_u64(&mut out, layout.splits.len() as u64);
    for split in &layout.splits {
        put_u64(&mut out, split.id);
        put_u64(&mut out, split.chunks.len() as u64);
        for (chunk, _) in &split.chunks {
            put_u64(&mut out, chunk.id.0);
            put_field(&mut out, &encode::encode_chunk_records(&chunk.records));
        }
    }
    match &layout.ring {
        None => out.push(0),
        Some(ring) => {
            out.push(1);
            put_u64(&mut out, ring.slots.len() as u64);
            for slot in &ring.slots {
                match slot {
                    None => {
                        out.push(0);
                        put_u64(&mut out, 0);
                    }
                    Some(id) => {
                        out.push(1);
                        put_u64(&mut out, *id);
                    }
                }
            }
        }
    }
    put_u64(&mut out, accs.len() as u64);
    for (key, acc) in accs {
        put_field(&mut out, key);
        put_field(&mut out, acc.payload_fp.as_bytes());
        put_u64(&mut out, acc.partials);
        match &acc.source {
            AccSource::Leaf(p) => {
                out.push(0);
                put_field(&mut out, &encode::encode_values(&p.values));
            }
            AccSource::Combine { input_fp } => {
                out.push(1);
                put_field(&mut out, input_fp.as_bytes());
            }
        }
    }
    out
}

fn bad(e: impl std::fmt::Display) -> EngineError {
    EngineError::Ledger(e.to_string())
}

/// Bounds a declared element count by the bytes left, so a corrupt count
/// cannot trigger a huge allocation.
fn count(r: &mut Reader<'_>, min_size: usize) -> Result<usize, EngineError> {
    let n = r.u64().map_err(bad)?;
    if n > (r.remaining() / min_size.max(1)) as u64 {
        return Err(bad(format!("count {n} exceeds remaining bytes")));
    }
    Ok(n as usize)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Restored, EngineError> {
    let mut r = Reader::new(bytes);
    let version = r.u32().map_err(bad)?;
    if version != VERSION {
        return Err(bad(format!("unsupported ledger version {version}")));
    }
    let job_fp = r.fingerprint().map_err(bad)?;
    let next_chunk = r.u64().map_err(bad)?;
    let next_split = r.u64().map_err(bad)?;
    let n_splits = count(&mut r, 16)?;
    let mut splits = Vec::with_capacity(n_splits);
    for _ in 0..n_splits {
        let id = r.u64().map_err(bad)?;
        let n_chunks = count(&mut r, 12)?;
        let mut chunks = Vec::with_capacity(n_chunks);
        for _ in 0..n_chunks {
            let chunk_id = r.u64().map_err(bad)?;
            let records = encode::decode_chunk_records(r.field().map_err(bad)?).map_err(bad)?;
            chunks.push(Chunk::new(chunk_id, records));
        }
        splits.push((id, chunks));
    }
    let ring = match r.u8().map_err(bad)? {
        0 => None,
        1 => {
            let n = count(&mut r, 9)?;
            let mut slots = Vec::with_capacity(n);
            for _ in 0..n {
                let flag = r.u8().map_err(bad)?;
                let id = r.u64().map_err(bad)?;
                slots.push(match flag {
                    0 => None,
                    1 => Some(id),
                    f => return Err(bad(format!("bad slot flag {f}"))),
                });
            }
            Some(Ring::from_slots(slots))
        }
        f => return Err(bad(format!("bad ring flag {f}"))),
    };
    let n_accs = count(&mut r, 8)?;
    let mut accumulators = Vec::with_capacity(n_accs);
    for _ in 0..n_accs {
        let key = r.field().map_err(bad)?.to_vec();
        let payload_fp = r.fingerprint().map_err(bad)?;
        let partials = r.u64().map_err(bad)?;
        let source = match r.u8().map_err(bad)? {
            0 => {
                let values = encode::decode_values(r.field().map_err(bad)?).map_err(bad)?;
                AccSource::Leaf(Arc::new(Partial::new(values)))
            }
            1 => AccSource::Combine {
                input_fp: r.fingerprint().map_err(bad)?,
            },
            f => return Err(bad(format!("bad accumulator source {f}"))),
        };
        accumulators.push((
            key,
            Accumulator {
                payload_fp,
                source,
                partials,
            },
        ));
    }
    r.finish().map_err(bad)?;
    Ok(Restored {
        job_fp,
        layout: Layout::restore(splits, ring, next_chunk, next_split),
        accumulators,
    })
}
