//! Dual-subtree Merkle tree.
//!
//! The root commits to two independent subtrees: one for the block's own
//! transactions and one for data carried over from the producer chain.
//! Hashing is domain separated so no value can be reinterpreted at a
//! different position in the tree:
//!
//! | tag    | input                        |
//! |--------|------------------------------|
//! | `0x00` | leaf bytes                   |
//! | `0x01` | left child ‖ right child     |
//! | `0x02` | internal subroot ‖ crosschain subroot |
//! | `0x03` | (nothing) root of an empty subtree |
//!
//! An odd node at any level is promoted to the next level unchanged rather
//! than paired with a copy of itself.

use serde::{Deserialize, Serialize};

use crate::encoding::{DecodeError, Reader, Writer};
use crate::Hash256;

const LEAF_TAG: u8 = 0x00;
const NODE_TAG: u8 = 0x01;
const DUAL_TAG: u8 = 0x02;
const EMPTY_TAG: u8 = 0x03;

pub fn leaf_hash(data: &[u8]) -> Hash256 {
    Hash256::digest_parts(&[&[LEAF_TAG], data])
}

pub fn node_hash(left: &Hash256, right: &Hash256) -> Hash256 {
    Hash256::digest_parts(&[&[NODE_TAG], left.as_bytes(), right.as_bytes()])
}

pub fn dual_hash(internal: &Hash256, crosschain: &Hash256) -> Hash256 {
    Hash256::digest_parts(&[&[DUAL_TAG], internal.as_bytes(), crosschain.as_bytes()])
}

pub fn empty_root() -> Hash256 {
    Hash256::digest(&[EMPTY_TAG])
}

/// Which half of the dual tree a leaf lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subtree {
    Internal,
    CrossChain,
}

/// Position of the sibling relative to the running hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofStep {
    pub sibling: Hash256,
    pub side: Side,
}

/// Inclusion proof from a leaf up to the dual root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub subtree: Subtree,
    pub leaf_index: u32,
    pub leaf_count: u32,
    pub path: Vec<ProofStep>,
    /// Root of the other subtree.
    pub other_subroot: Hash256,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualMerkle {
    pub internal_subroot: Hash256,
    pub crosschain_subroot: Hash256,
    pub root: Hash256,
}

impl DualMerkle {
    pub fn from_subroots(internal_subroot: Hash256, crosschain_subroot: Hash256) -> Self {
        DualMerkle {
            internal_subroot,
            crosschain_subroot,
            root: dual_hash(&internal_subroot, &crosschain_subroot),
        }
    }
}

/// The tree plus one proof per leaf, in leaf order.
#[derive(Debug, Clone)]
pub struct DualMerkleTree {
    pub roots: DualMerkle,
    pub internal_proofs: Vec<MerkleProof>,
    pub crosschain_proofs: Vec<MerkleProof>,
}

fn levels(leaves: Vec<Hash256>) -> Vec<Vec<Hash256>> {
    let mut out = vec![leaves];
    while out.last().is_some_and(|l| l.len() > 1) {
        let next = out
            .last()
            .unwrap()
            .chunks(2)
            .map(|c| match c {
                [l, r] => node_hash(l, r),
                [single] => *single,
                _ => unreachable!(),
            })
            .collect();
        out.push(next);
    }
    out
}

fn subroot_of(levels: &[Vec<Hash256>]) -> Hash256 {
    match levels.last().and_then(|l| l.first()) {
        Some(h) => *h,
        None => empty_root(),
    }
}

/// Sibling sides along the path of `index` in a tree of `count` leaves;
/// `None` when the proof position is impossible.
fn path_shape(mut index: usize, mut count: usize) -> Option<Vec<Side>> {
    if index >= count {
        return None;
    }
    let mut sides = Vec::new();
    while count > 1 {
        if index % 2 == 1 {
            sides.push(Side::Left);
        } else if index + 1 < count {
            sides.push(Side::Right);
        }
        index /= 2;
        count = count.div_ceil(2);
    }
    Some(sides)
}

fn proofs_for(levels: &[Vec<Hash256>], subtree: Subtree, other: Hash256) -> Vec<MerkleProof> {
    let count = levels[0].len();
    (0..count)
        .map(|leaf| {
            let mut idx = leaf;
            let mut path = Vec::new();
            for level in &levels[..levels.len() - 1] {
                if idx % 2 == 1 {
                    path.push(ProofStep { sibling: level[idx - 1], side: Side::Left });
                } else if idx + 1 < level.len() {
                    path.push(ProofStep { sibling: level[idx + 1], side: Side::Right });
                }
                idx /= 2;
            }
            MerkleProof {
                subtree,
                leaf_index: leaf as u32,
                leaf_count: count as u32,
                path,
                other_subroot: other,
            }
        })
        .collect()
}

/// Root of a single subtree over raw leaves.
pub fn subtree_root<L: AsRef<[u8]>>(leaves: &[L]) -> Hash256 {
    let hashed = leaves.iter().map(|l| leaf_hash(l.as_ref())).collect();
    subroot_of(&levels(hashed))
}

pub fn dual_merkle_root<A: AsRef<[u8]>, B: AsRef<[u8]>>(internal: &[A], crosschain: &[B]) -> DualMerkle {
    DualMerkle::from_subroots(subtree_root(internal), subtree_root(crosschain))
}

pub fn build_dual_merkle<A: AsRef<[u8]>, B: AsRef<[u8]>>(internal: &[A], crosschain: &[B]) -> DualMerkleTree {
    let int_levels = levels(internal.iter().map(|l| leaf_hash(l.as_ref())).collect());
    let cc_levels = levels(crosschain.iter().map(|l| leaf_hash(l.as_ref())).collect());
    let roots = DualMerkle::from_subroots(subroot_of(&int_levels), subroot_of(&cc_levels));
    let internal_proofs = if internal.is_empty() {
        Vec::new()
    } else {
        proofs_for(&int_levels, Subtree::Internal, roots.crosschain_subroot)
    };
    let crosschain_proofs = if crosschain.is_empty() {
        Vec::new()
    } else {
        proofs_for(&cc_levels, Subtree::CrossChain, roots.internal_subroot)
    };
    DualMerkleTree { roots, internal_proofs, crosschain_proofs }
}

/// Folds `leaf` up `proof` and checks the result against `expected_root`.
///
/// The path must have exactly the shape implied by `leaf_index` and
/// `leaf_count`, and the subtree tag decides which side of the dual root the
/// folded value occupies. Malformed proofs yield `false`.
pub fn verify_merkle_proof(leaf: &[u8], proof: &MerkleProof, expected_root: &Hash256) -> bool {
    fold_subroot(leaf, proof)
        .map(|sub| {
            let root = match proof.subtree {
                Subtree::Internal => dual_hash(&sub, &proof.other_subroot),
                Subtree::CrossChain => dual_hash(&proof.other_subroot, &sub),
            };
            root == *expected_root
        })
        .unwrap_or(false)
}

/// Subroot reconstructed from the leaf and path, if the path is well formed.
pub fn fold_subroot(leaf: &[u8], proof: &MerkleProof) -> Option<Hash256> {
    let shape = path_shape(proof.leaf_index as usize, proof.leaf_count as usize)?;
    if shape.len() != proof.path.len() {
        return None;
    }
    let mut acc = leaf_hash(leaf);
    for (step, expected) in proof.path.iter().zip(shape) {
        if step.side != expected {
            return None;
        }
        acc = match step.side {
            Side::Left => node_hash(&step.sibling, &acc),
            Side::Right => node_hash(&acc, &step.sibling),
        };
    }
    Some(acc)
}

impl MerkleProof {
    pub fn encode_into(&self, w: &mut Writer) {
        w.u8(match self.subtree {
            Subtree::Internal => 0,
            Subtree::CrossChain => 1,
        });
        w.u32(self.leaf_index).u32(self.leaf_count);
        w.u16(self.path.len() as u16);
        for step in &self.path {
            w.u8(match step.side {
                Side::Left => 0,
                Side::Right => 1,
            });
            w.raw(step.sibling.as_bytes());
        }
        w.raw(self.other_subroot.as_bytes());
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let subtree = match r.u8()? {
            0 => Subtree::Internal,
            1 => Subtree::CrossChain,
            tag => return Err(DecodeError::BadTag { what: "subtree", tag }),
        };
        let leaf_index = r.u32()?;
        let leaf_count = r.u32()?;
        let n = r.u16()? as usize;
        let mut path = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let side = match r.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                tag => return Err(DecodeError::BadTag { what: "side", tag }),
            };
            path.push(ProofStep { sibling: r.hash()?, side });
        }
        let other_subroot = r.hash()?;
        Ok(MerkleProof { subtree, leaf_index, leaf_count, path, other_subroot })
    }
}
