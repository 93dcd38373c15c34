//! Fixed-width trees: a static perfect binary skeleton over the bucket slots
//! of a sliding window, padded with empty slots up to a power of two.
//!
//! Node identity is `(level, first slot)`, so replacing the contents of one
//! slot dirties exactly the path from that leaf to the root. Every node over
//! at least one real bucket is a Combine task, empty slots included; only
//! subtrees made entirely of padding are identities.

use super::{ContractionTree, NodeId, NodeKind, Partial, TreeError, TreeMode, TreeNode};
use crate::model::Fingerprint;

fn slot_ident(level: u32, start: usize) -> Fingerprint {
    let mut buf = Vec::with_capacity(16);
    buf.extend_from_slice(b"slot");
    buf.extend_from_slice(&level.to_be_bytes());
    buf.extend_from_slice(&(start as u64).to_be_bytes());
    Fingerprint::of(&buf)
}

/// Builds the skeleton over `buckets`, one payload fingerprint per slot (the
/// empty partial's fingerprint for an empty slot).
pub fn build_fixed(
    key: &[u8],
    buckets: &[Fingerprint],
    bucket_count: usize,
) -> Result<ContractionTree, TreeError> {
    let mode = TreeMode::fixed(bucket_count)?;
    if buckets.len() != bucket_count {
        return Err(TreeError::BucketCountMismatch {
            expected: bucket_count,
            found: buckets.len(),
        });
    }
    let padded = bucket_count.next_power_of_two();
    let empty = Partial::empty_fp();
    let leaves: Vec<TreeNode> = (0..padded)
        .map(|slot| TreeNode {
            id: NodeId {
                level: 0,
                ident: slot_ident(0, slot),
            },
            payload_fp: buckets.get(slot).copied().unwrap_or(empty),
            children: 0..0,
            kind: NodeKind::Leaf,
        })
        .collect();
    let mut levels = vec![leaves];
    let mut width = 1usize;
    while levels.last().unwrap().len() > 1 {
        let level = levels.len() as u32;
        width *= 2;
        let below_len = levels.last().unwrap().len();
        let mut next = Vec::with_capacity(below_len / 2);
        for j in 0..below_len / 2 {
            let children = 2 * j..2 * j + 2;
            // Subtrees made only of padding never change and run no task.
            let real = j * width < bucket_count;
            next.push(TreeNode {
                id: NodeId {
                    level,
                    ident: slot_ident(level, j * width),
                },
                payload_fp: if real {
                    Fingerprint::from_bytes([0; 32])
                } else {
                    empty
                },
                children,
                kind: if real {
                    NodeKind::Combine
                } else {
                    NodeKind::Identity
                },
            });
        }
        levels.push(next);
    }
    Ok(ContractionTree::from_levels(key.to_vec(), mode, levels))
}
