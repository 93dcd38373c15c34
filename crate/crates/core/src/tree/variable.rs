//! Variable-width contraction.
//!
//! Each level is scanned left to right and cut after every node whose coin
//! comes up true. A group of one node is merged with the next group, and a
//! trailing single node joins the group before it, so every parent has at
//! least two children and each level is at most half the size of the one
//! below. Coins depend only on a node's own identity, level and the salt,
//! never on its index, so inserting or deleting a leaf regroups only a
//! constant expected number of nodes per level.

use std::ops::Range;

use super::{ContractionTree, NodeId, NodeKind, TreeError, TreeMode, TreeNode};
use crate::encode;
use crate::model::Fingerprint;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeafSpec {
    /// Position-independent identity (for example key + split id).
    pub ident: Fingerprint,
    pub payload_fp: Fingerprint,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic pseudo-random bit for a node.
pub fn coin(fp: &Fingerprint, level: u32, salt: u64) -> bool {
    let mixed = splitmix64(salt ^ splitmix64(u64::from(level) ^ 0x5bd1_e995));
    splitmix64(fp.prefix_u64() ^ mixed) & 1 == 1
}

/// Groups one level of node identities into parent ranges.
pub fn contract_level(ids: &[Fingerprint], level: u32, salt: u64) -> Vec<Range<usize>> {
    let n = ids.len();
    if n <= 1 {
        return std::iter::once(0..n).collect();
    }
    let mut out: Vec<Range<usize>> = Vec::with_capacity(n / 2);
    let mut pending: Option<usize> = None;
    let mut start = 0;
    for (i, id) in ids.iter().enumerate() {
        if i + 1 < n && !coin(id, level, salt) {
            continue;
        }
        let group = pending.take().unwrap_or(start)..i + 1;
        start = i + 1;
        if group.len() == 1 {
            pending = Some(group.start);
        } else {
            out.push(group);
        }
    }
    if pending.is_some() {
        // n >= 2, so a lone trailing node always has a group before it.
        out.last_mut().expect("preceding group").end = n;
    }
    out
}

pub fn build_variable(
    key: &[u8],
    leaves: &[LeafSpec],
    salt: u64,
) -> Result<ContractionTree, TreeError> {
    if leaves.is_empty() {
        return Err(TreeError::EmptyLeaves);
    }
    let mut levels: Vec<Vec<TreeNode>> = vec![leaves
        .iter()
        .map(|leaf| TreeNode {
            id: NodeId {
                level: 0,
                ident: leaf.ident,
            },
            payload_fp: leaf.payload_fp,
            children: 0..0,
            kind: NodeKind::Leaf,
        })
        .collect()];

    while levels.last().unwrap().len() > 1 {
        let below = levels.last().unwrap();
        let level = (levels.len() - 1) as u32;
        let ids: Vec<Fingerprint> = below.iter().map(|n| n.id.ident).collect();
        let next: Vec<TreeNode> = contract_level(&ids, level, salt)
            .into_iter()
            .map(|range| TreeNode {
                id: NodeId {
                    level: level + 1,
                    ident: Fingerprint::of(&encode::encode_node_ident(
                        level + 1,
                        &ids[range.clone()],
                    )),
                },
                payload_fp: Fingerprint::from_bytes([0; 32]),
                children: range,
                kind: NodeKind::Combine,
            })
            .collect();
        debug_assert!(next.len() * 2 <= ids.len());
        levels.push(next);
    }
    Ok(ContractionTree::from_levels(
        key.to_vec(),
        TreeMode::VariableWidth,
        levels,
    ))
}
