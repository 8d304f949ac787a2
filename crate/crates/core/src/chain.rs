//! Blocks, transactions, proof-of-work sealing and longest-chain fork choice.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confirmation::CrossChainSegment;
use crate::encoding::{DecodeError, Reader, Writer};
use crate::merkle::{dual_merkle_root, DualMerkle};
use crate::vm::ContractCode;
use crate::Hash256;

/// Size of the canonical header encoding in bytes.
pub const HEADER_SIZE: usize = 1 + 8 + 32 + 32 + 2 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChainId {
    Producer,
    Consumer,
}

impl ChainId {
    fn tag(self) -> u8 {
        match self {
            ChainId::Producer => 0,
            ChainId::Consumer => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub chain_id: ChainId,
    pub height: u64,
    pub parent: Hash256,
    pub merkle_root: Hash256,
    pub difficulty_bits: u16,
    /// Simulated milliseconds.
    pub timestamp: u64,
    pub nonce: u64,
}

impl BlockHeader {
    /// Genesis header committing to an empty body.
    pub fn genesis(chain_id: ChainId) -> Self {
        BlockHeader {
            chain_id,
            height: 0,
            parent: Hash256::ZERO,
            merkle_root: dual_merkle_root::<&[u8], &[u8]>(&[], &[]).root,
            difficulty_bits: 0,
            timestamp: 0,
            nonce: 0,
        }
    }

    /// `chain_id(1) ‖ height(8) ‖ parent(32) ‖ merkle_root(32) ‖ difficulty_bits(2) ‖ timestamp(8) ‖ nonce(8)`
    pub fn encode(&self) -> [u8; HEADER_SIZE] {
        let mut out = [0u8; HEADER_SIZE];
        out[0] = self.chain_id.tag();
        out[1..9].copy_from_slice(&self.height.to_be_bytes());
        out[9..41].copy_from_slice(self.parent.as_bytes());
        out[41..73].copy_from_slice(self.merkle_root.as_bytes());
        out[73..75].copy_from_slice(&self.difficulty_bits.to_be_bytes());
        out[75..83].copy_from_slice(&self.timestamp.to_be_bytes());
        out[83..91].copy_from_slice(&self.nonce.to_be_bytes());
        out
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let chain_id = match r.u8()? {
            0 => ChainId::Producer,
            1 => ChainId::Consumer,
            tag => return Err(DecodeError::BadTag { what: "chain id", tag }),
        };
        Ok(BlockHeader {
            chain_id,
            height: r.u64()?,
            parent: r.hash()?,
            merkle_root: r.hash()?,
            difficulty_bits: r.u16()?,
            timestamp: r.u64()?,
            nonce: r.u64()?,
        })
    }

    pub fn hash(&self) -> Hash256 {
        hash_header(self)
    }

    pub fn meets_own_difficulty(&self) -> bool {
        self.hash().meets_difficulty(self.difficulty_bits)
    }
}

/// SHA-256 over the canonical header bytes.
pub fn hash_header(header: &BlockHeader) -> Hash256 {
    Hash256::digest(&header.encode())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxKind {
    Transfer,
    Deploy,
    Invoke,
    Terminate,
    EmbeddedDeployInvoke,
}

impl TxKind {
    /// Kinds that take part in a contract's lifecycle and so must cross the bridge.
    pub fn is_contract_kind(self) -> bool {
        !matches!(self, TxKind::Transfer)
    }

    pub fn carries_result(self) -> bool {
        matches!(self, TxKind::Invoke | TxKind::EmbeddedDeployInvoke)
    }

    fn tag(self) -> u8 {
        match self {
            TxKind::Transfer => 0,
            TxKind::Deploy => 1,
            TxKind::Invoke => 2,
            TxKind::Terminate => 3,
            TxKind::EmbeddedDeployInvoke => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxPayload {
    Transfer { to: u64, amount: u64 },
    Deploy { code: ContractCode, init_params: Vec<i64> },
    Invoke { contract_id: Hash256, method: String, params: Vec<i64> },
    Terminate { contract_id: Hash256 },
    EmbeddedDeployInvoke { code: ContractCode, init_params: Vec<i64>, method: String, params: Vec<i64> },
}

impl TxPayload {
    pub fn kind(&self) -> TxKind {
        match self {
            TxPayload::Transfer { .. } => TxKind::Transfer,
            TxPayload::Deploy { .. } => TxKind::Deploy,
            TxPayload::Invoke { .. } => TxKind::Invoke,
            TxPayload::Terminate { .. } => TxKind::Terminate,
            TxPayload::EmbeddedDeployInvoke { .. } => TxKind::EmbeddedDeployInvoke,
        }
    }

    fn encode(&self) -> Vec<u8> {
        fn params(w: &mut Writer, p: &[i64]) {
            w.u32(p.len() as u32);
            for v in p {
                w.i64(*v);
            }
        }
        let mut w = Writer::new();
        match self {
            TxPayload::Transfer { to, amount } => {
                w.u64(*to).u64(*amount);
            }
            TxPayload::Deploy { code, init_params } => {
                code.encode_into(&mut w);
                params(&mut w, init_params);
            }
            TxPayload::Invoke { contract_id, method, params: p } => {
                w.raw(contract_id.as_bytes()).str(method);
                params(&mut w, p);
            }
            TxPayload::Terminate { contract_id } => {
                w.raw(contract_id.as_bytes());
            }
            TxPayload::EmbeddedDeployInvoke { code, init_params, method, params: p } => {
                code.encode_into(&mut w);
                params(&mut w, init_params);
                w.str(method);
                params(&mut w, p);
            }
        }
        w.finish()
    }

    fn decode(kind: u8, bytes: &[u8]) -> Result<Self, DecodeError> {
        fn params(r: &mut Reader<'_>) -> Result<Vec<i64>, DecodeError> {
            let n = r.u32()? as usize;
            if n > r.remaining() / 8 {
                return Err(DecodeError::BadLength(n));
            }
            (0..n).map(|_| r.i64()).collect()
        }
        let mut r = Reader::new(bytes);
        let p = match kind {
            0 => TxPayload::Transfer { to: r.u64()?, amount: r.u64()? },
            1 => TxPayload::Deploy { code: ContractCode::decode_from(&mut r)?, init_params: params(&mut r)? },
            2 => TxPayload::Invoke {
                contract_id: r.hash()?,
                method: r.string("method")?,
                params: params(&mut r)?,
            },
            3 => TxPayload::Terminate { contract_id: r.hash()? },
            4 => TxPayload::EmbeddedDeployInvoke {
                code: ContractCode::decode_from(&mut r)?,
                init_params: params(&mut r)?,
                method: r.string("method")?,
                params: params(&mut r)?,
            },
            tag => return Err(DecodeError::BadTag { what: "transaction kind", tag }),
        };
        r.finish()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: u64,
    pub payload: TxPayload,
    pub nonce: u64,
    /// Result recorded by the producer for invocation kinds.
    pub claimed_result: Option<Vec<u8>>,
}

impl Transaction {
    pub fn new(sender: u64, payload: TxPayload, nonce: u64) -> Self {
        Transaction { sender, payload, nonce, claimed_result: None }
    }

    pub fn with_claimed_result(mut self, result: Vec<u8>) -> Self {
        self.claimed_result = Some(result);
        self
    }

    pub fn kind(&self) -> TxKind {
        self.payload.kind()
    }

    fn encode_body(&self, w: &mut Writer) {
        w.u8(self.kind().tag());
        w.bytes(&self.sender.to_be_bytes());
        w.bytes(&self.payload.encode());
        w.bytes(&self.nonce.to_be_bytes());
    }

    /// `kind(1) ‖ sender ‖ payload ‖ nonce ‖ claimed_result`, each field
    /// after the kind prefixed with a u32 length. The claimed result field
    /// is `0x00` when absent and `0x01 ‖ bytes` when present.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_body(&mut w);
        match &self.claimed_result {
            None => w.bytes(&[0]),
            Some(r) => {
                let mut f = Vec::with_capacity(r.len() + 1);
                f.push(1);
                f.extend_from_slice(r);
                w.bytes(&f)
            }
        };
        w.finish()
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let kind = r.u8()?;
        let sender = u64::from_be_bytes(
            r.bytes()?.try_into().map_err(|_| DecodeError::BadLength(0))?,
        );
        let payload = TxPayload::decode(kind, r.bytes()?)?;
        let nonce = u64::from_be_bytes(r.bytes()?.try_into().map_err(|_| DecodeError::BadLength(0))?);
        let claimed = r.bytes()?;
        let claimed_result = match claimed.split_first() {
            Some((0, [])) => None,
            Some((1, rest)) => Some(rest.to_vec()),
            Some((tag, _)) => return Err(DecodeError::BadTag { what: "claimed result", tag: *tag }),
            None => return Err(DecodeError::BadLength(0)),
        };
        Ok(Transaction { sender, payload, nonce, claimed_result })
    }

    /// Identity of the transaction: hash of every field except the claimed
    /// result. Invocation seeds derive from it, so it cannot depend on the
    /// result it seeds.
    pub fn id(&self) -> Hash256 {
        let mut w = Writer::new();
        self.encode_body(&mut w);
        Hash256::digest(&w.finish())
    }

    /// Hash of the full encoding, including the claimed result. This is the
    /// block's Merkle leaf.
    pub fn commitment(&self) -> Hash256 {
        Hash256::digest(&self.encode())
    }

    pub fn encoded_len(&self) -> usize {
        self.encode().len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub internal_txs: Vec<Transaction>,
    pub crosschain_payload: Option<CrossChainSegment>,
}

impl Block {
    pub fn genesis(chain_id: ChainId) -> Self {
        Block { header: BlockHeader::genesis(chain_id), internal_txs: Vec::new(), crosschain_payload: None }
    }

    pub fn hash(&self) -> Hash256 {
        self.header.hash()
    }

    pub fn internal_leaves(&self) -> Vec<[u8; 32]> {
        self.internal_txs.iter().map(|t| t.commitment().0).collect()
    }

    pub fn crosschain_leaves(&self) -> Vec<[u8; 32]> {
        self.crosschain_payload.as_ref().map(|s| s.leaves()).unwrap_or_default()
    }

    pub fn compute_merkle(&self) -> DualMerkle {
        compute_merkle(&self.internal_txs, self.crosschain_payload.as_ref())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(&self.header.encode());
        w.u32(self.internal_txs.len() as u32);
        for tx in &self.internal_txs {
            w.bytes(&tx.encode());
        }
        match &self.crosschain_payload {
            None => {
                w.u8(0);
            }
            Some(seg) => {
                w.u8(1);
                w.raw(&seg.encode());
            }
        }
        w.finish()
    }

    pub fn encoded_len(&self) -> usize {
        self.encode().len()
    }
}

fn compute_merkle(txs: &[Transaction], payload: Option<&CrossChainSegment>) -> DualMerkle {
    let internal: Vec<[u8; 32]> = txs.iter().map(|t| t.commitment().0).collect();
    let cross = payload.map(|s| s.leaves()).unwrap_or_default();
    dual_merkle_root(&internal, &cross)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("block of {size} bytes exceeds limit of {limit}")]
    OversizedBlock { size: usize, limit: usize },
    #[error("unknown parent {0}")]
    UnknownParent(Hash256),
    #[error("header hash does not meet difficulty")]
    BadProofOfWork,
    #[error("merkle root does not match block body")]
    MerkleMismatch,
    #[error("height {got} does not follow parent height {parent}")]
    BadHeight { parent: u64, got: u64 },
    #[error("block belongs to the other chain")]
    WrongChain,
    #[error("height {height} beyond canonical tip {tip}")]
    RangeOutOfBounds { height: u64, tip: u64 },
}

/// Seals a child of `parent`, searching nonces upward from zero.
pub fn seal_block(
    parent: &BlockHeader,
    txs: Vec<Transaction>,
    payload: Option<CrossChainSegment>,
    difficulty_bits: u16,
    timestamp: u64,
    max_block_size: usize,
) -> Result<Block, ChainError> {
    let merkle = compute_merkle(&txs, payload.as_ref());
    let mut block = Block {
        header: BlockHeader {
            chain_id: parent.chain_id,
            height: parent.height + 1,
            parent: parent.hash(),
            merkle_root: merkle.root,
            difficulty_bits,
            timestamp,
            nonce: 0,
        },
        internal_txs: txs,
        crosschain_payload: payload,
    };
    let size = block.encoded_len();
    if size > max_block_size {
        return Err(ChainError::OversizedBlock { size, limit: max_block_size });
    }
    let mut bytes = block.header.encode();
    loop {
        if Hash256::digest(&bytes).meets_difficulty(difficulty_bits) {
            break;
        }
        block.header.nonce += 1;
        bytes[83..91].copy_from_slice(&block.header.nonce.to_be_bytes());
    }
    Ok(block)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainEvent {
    Extended,
    SideChain,
    Rebranch {
        old_head: Hash256,
        new_head: Hash256,
        fork_point: Hash256,
        /// Blocks leaving the canonical branch, old tip first.
        rolled_back: Vec<Hash256>,
        /// Blocks joining the canonical branch, lowest first.
        applied: Vec<Hash256>,
    },
    AlreadyKnown,
}

#[derive(Debug, Clone)]
struct Stored {
    block: Block,
    arrival: u64,
}

/// One node's view of a chain: every known block, the tips, and the
/// canonical branch selected by the longest-chain rule (ties go to the tip
/// that arrived first).
#[derive(Debug, Clone)]
pub struct ChainView {
    chain_id: ChainId,
    blocks: HashMap<Hash256, Stored>,
    heads: HashSet<Hash256>,
    canonical_head: Hash256,
    /// Canonical block hash per height.
    canonical: Vec<Hash256>,
    next_arrival: u64,
    min_difficulty: u16,
    max_block_size: usize,
}

impl ChainView {
    pub fn new(genesis: Block, min_difficulty: u16, max_block_size: usize) -> Self {
        let h = genesis.hash();
        let chain_id = genesis.header.chain_id;
        let mut blocks = HashMap::new();
        blocks.insert(h, Stored { block: genesis, arrival: 0 });
        ChainView {
            chain_id,
            blocks,
            heads: HashSet::from([h]),
            canonical_head: h,
            canonical: vec![h],
            next_arrival: 1,
            min_difficulty,
            max_block_size,
        }
    }

    pub fn with_genesis(chain_id: ChainId, min_difficulty: u16, max_block_size: usize) -> Self {
        Self::new(Block::genesis(chain_id), min_difficulty, max_block_size)
    }

    pub fn chain_id(&self) -> ChainId {
        self.chain_id
    }

    pub fn min_difficulty(&self) -> u16 {
        self.min_difficulty
    }

    pub fn max_block_size(&self) -> usize {
        self.max_block_size
    }

    pub fn canonical_head(&self) -> Hash256 {
        self.canonical_head
    }

    pub fn tip(&self) -> &Block {
        self.get(&self.canonical_head).expect("head is stored")
    }

    pub fn height(&self) -> u64 {
        self.canonical.len() as u64 - 1
    }

    pub fn heads(&self) -> impl Iterator<Item = &Hash256> {
        self.heads.iter()
    }

    pub fn get(&self, hash: &Hash256) -> Option<&Block> {
        self.blocks.get(hash).map(|s| &s.block)
    }

    pub fn contains(&self, hash: &Hash256) -> bool {
        self.blocks.contains_key(hash)
    }

    pub fn arrival(&self, hash: &Hash256) -> Option<u64> {
        self.blocks.get(hash).map(|s| s.arrival)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn genesis(&self) -> &Block {
        self.get(&self.canonical[0]).expect("genesis is stored")
    }

    pub fn canonical_hashes(&self) -> &[Hash256] {
        &self.canonical
    }

    pub fn canonical_at(&self, height: u64) -> Option<&Block> {
        self.canonical.get(height as usize).and_then(|h| self.get(h))
    }

    pub fn is_canonical(&self, hash: &Hash256) -> bool {
        self.get(hash)
            .map(|b| self.canonical.get(b.header.height as usize) == Some(hash))
            .unwrap_or(false)
    }

    /// Canonical blocks from genesis to tip.
    pub fn canonical_blocks(&self) -> impl Iterator<Item = &Block> {
        self.canonical.iter().map(|h| self.get(h).expect("canonical block stored"))
    }

    /// Checks a block against this view without inserting it.
    pub fn check_block(&self, block: &Block) -> Result<(), ChainError> {
        if block.header.chain_id != self.chain_id {
            return Err(ChainError::WrongChain);
        }
        let parent = self
            .get(&block.header.parent)
            .ok_or(ChainError::UnknownParent(block.header.parent))?;
        if block.header.height != parent.header.height + 1 {
            return Err(ChainError::BadHeight { parent: parent.header.height, got: block.header.height });
        }
        if block.header.difficulty_bits < self.min_difficulty || !block.header.meets_own_difficulty() {
            return Err(ChainError::BadProofOfWork);
        }
        if block.compute_merkle().root != block.header.merkle_root {
            return Err(ChainError::MerkleMismatch);
        }
        let size = block.encoded_len();
        if size > self.max_block_size {
            return Err(ChainError::OversizedBlock { size, limit: self.max_block_size });
        }
        Ok(())
    }

    /// Validates and inserts `block`, switching branches when it creates a
    /// strictly longer chain.
    pub fn apply_block(&mut self, block: Block) -> Result<ChainEvent, ChainError> {
        let hash = block.hash();
        if self.blocks.contains_key(&hash) {
            return Ok(ChainEvent::AlreadyKnown);
        }
        self.check_block(&block)?;
        let parent = block.header.parent;
        let height = block.header.height;
        self.blocks.insert(hash, Stored { block, arrival: self.next_arrival });
        self.next_arrival += 1;
        self.heads.remove(&parent);
        self.heads.insert(hash);

        if parent == self.canonical_head {
            self.canonical.push(hash);
            self.canonical_head = hash;
            return Ok(ChainEvent::Extended);
        }
        if height <= self.height() {
            return Ok(ChainEvent::SideChain);
        }

        // new branch is strictly longer: find where it meets the canonical one
        let mut applied = vec![hash];
        let mut cursor = parent;
        loop {
            let b = &self.blocks[&cursor].block;
            if self.canonical[b.header.height as usize] == cursor {
                break;
            }
            applied.push(cursor);
            cursor = b.header.parent;
        }
        applied.reverse();
        let fork_height = self.blocks[&cursor].block.header.height as usize;
        let rolled_back: Vec<Hash256> = self.canonical[fork_height + 1..].iter().rev().copied().collect();
        let old_head = self.canonical_head;
        self.canonical.truncate(fork_height + 1);
        self.canonical.extend_from_slice(&applied);
        self.canonical_head = hash;
        Ok(ChainEvent::Rebranch { old_head, new_head: hash, fork_point: cursor, rolled_back, applied })
    }
}

/// Greatest-height tip; among equals, the earliest arrival.
pub fn choose_head(view: &ChainView) -> Hash256 {
    *view
        .heads()
        .min_by_key(|h| {
            let s = &view.blocks[*h];
            (std::cmp::Reverse(s.block.header.height), s.arrival)
        })
        .expect("view always holds genesis")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAX: usize = 1 << 20;

    fn view() -> ChainView {
        ChainView::with_genesis(ChainId::Producer, 0, MAX)
    }

    fn child(parent: &BlockHeader, tag: u64) -> Block {
        let tx = Transaction::new(tag, TxPayload::Transfer { to: 1, amount: tag }, tag);
        seal_block(parent, vec![tx], None, 2, parent.timestamp + 10, MAX).unwrap()
    }

    fn extend(view: &mut ChainView, from: &BlockHeader, n: usize, tag: u64) -> Vec<Block> {
        let mut out = Vec::new();
        let mut p = from.clone();
        for i in 0..n {
            let b = child(&p, tag * 1000 + i as u64);
            view.apply_block(b.clone()).unwrap();
            p = b.header.clone();
            out.push(b);
        }
        out
    }

    #[test]
    fn genesis_test_vector() {
        // digest of the 91-byte layout, computed with an independent SHA-256 tool
        let h = BlockHeader {
            chain_id: ChainId::Producer,
            height: 0,
            parent: Hash256::ZERO,
            merkle_root: Hash256::ZERO,
            difficulty_bits: 0,
            timestamp: 0,
            nonce: 0,
        };
        assert_eq!(h.encode(), [0u8; HEADER_SIZE]);
        assert_eq!(
            hash_header(&h).to_hex(),
            "2795ec931b5b17c9e0e5e5adb2ce787d413ab0c2bb29cfbf554668fea090eeea"
        );
        assert_eq!(hash_header(&h), hash_header(&h));
        let mut flipped = h.clone();
        flipped.nonce ^= 1;
        assert_ne!(hash_header(&flipped), hash_header(&h));
    }

    #[test]
    fn header_layout_is_big_endian() {
        let h = BlockHeader {
            chain_id: ChainId::Consumer,
            height: 0x0102,
            parent: Hash256([0xAA; 32]),
            merkle_root: Hash256([0xBB; 32]),
            difficulty_bits: 0x0304,
            timestamp: 0x0506,
            nonce: 0x0708,
        };
        let e = h.encode();
        assert_eq!(e[0], 1);
        assert_eq!(&e[1..9], &[0, 0, 0, 0, 0, 0, 1, 2]);
        assert_eq!(&e[73..75], &[3, 4]);
        assert_eq!(&e[81..83], &[5, 6]);
        assert_eq!(&e[89..91], &[7, 8]);
        let mut r = Reader::new(&e);
        assert_eq!(BlockHeader::decode_from(&mut r).unwrap(), h);
    }

    #[test]
    fn zero_difficulty_accepts_nonce_zero() {
        let g = BlockHeader::genesis(ChainId::Producer);
        let b = seal_block(&g, vec![], None, 0, 1, MAX).unwrap();
        assert_eq!(b.header.nonce, 0);
    }

    #[test]
    fn eight_bits_gives_zero_first_byte() {
        let g = BlockHeader::genesis(ChainId::Producer);
        let b = seal_block(&g, vec![], None, 8, 1, MAX).unwrap();
        assert_eq!(b.hash().0[0], 0);
        assert!(b.header.nonce > 0);
    }

    #[test]
    fn oversized_block_rejected() {
        let g = BlockHeader::genesis(ChainId::Producer);
        let tx = Transaction::new(1, TxPayload::Transfer { to: 2, amount: 3 }, 0);
        assert!(matches!(
            seal_block(&g, vec![tx], None, 0, 1, 50),
            Err(ChainError::OversizedBlock { .. })
        ));
    }

    #[test]
    fn single_chain_head() {
        let mut v = view();
        let g = v.genesis().header.clone();
        extend(&mut v, &g, 4, 1);
        assert_eq!(v.height(), 4);
        assert_eq!(choose_head(&v), v.canonical_head());
        assert_eq!(v.tip().header.height, 4);
    }

    #[test]
    fn longer_fork_wins_and_ties_keep_first() {
        let mut v = view();
        let g = v.genesis().header.clone();
        let a = extend(&mut v, &g, 4, 1);
        let b = extend(&mut v, &a[0].header, 3, 2); // tip at height 4, arrived later
        assert_eq!(v.canonical_head(), a[3].hash());
        assert_eq!(choose_head(&v), a[3].hash());
        let ev = v.apply_block(child(&b[2].header, 99)).unwrap();
        assert!(matches!(ev, ChainEvent::Rebranch { .. }));
        assert_eq!(v.height(), 5);
        assert_eq!(choose_head(&v), v.canonical_head());
    }

    #[test]
    fn rebranch_reports_old_branch() {
        let mut v = view();
        let g = v.genesis().header.clone();
        let main = extend(&mut v, &g, 3, 1); // heights 1..3
        // fork from height 1
        let f1 = child(&main[0].header, 50);
        assert_eq!(v.apply_block(f1.clone()).unwrap(), ChainEvent::SideChain);
        let f2 = child(&f1.header, 51);
        assert_eq!(v.apply_block(f2.clone()).unwrap(), ChainEvent::SideChain);
        let f3 = child(&f2.header, 52);
        let ev = v.apply_block(f3.clone()).unwrap();
        // hand-enumerated diff: heights 2 and 3 of main leave, f1..f3 join
        assert_eq!(
            ev,
            ChainEvent::Rebranch {
                old_head: main[2].hash(),
                new_head: f3.hash(),
                fork_point: main[0].hash(),
                rolled_back: vec![main[2].hash(), main[1].hash()],
                applied: vec![f1.hash(), f2.hash(), f3.hash()],
            }
        );
        assert!(v.is_canonical(&f1.hash()));
        assert!(!v.is_canonical(&main[1].hash()));
        assert!(v.is_canonical(&main[0].hash()));
    }

    #[test]
    fn apply_rejects_bad_blocks() {
        let mut v = ChainView::with_genesis(ChainId::Producer, 2, MAX);
        let g = v.genesis().header.clone();
        let good = child(&g, 1);

        let mut orphan = good.clone();
        orphan.header.parent = Hash256([9; 32]);
        assert_eq!(v.apply_block(orphan), Err(ChainError::UnknownParent(Hash256([9; 32]))));

        // declared difficulty below the chain minimum
        let weak = seal_block(&g, vec![], None, 0, 1, MAX).unwrap();
        assert_eq!(v.apply_block(weak), Err(ChainError::BadProofOfWork));
        // declared difficulty not actually met
        let mut forged = good.clone();
        forged.header.difficulty_bits = 40;
        assert_eq!(v.apply_block(forged), Err(ChainError::BadProofOfWork));

        let mut tampered = good.clone();
        tampered.internal_txs[0].nonce += 1;
        assert_eq!(v.apply_block(tampered), Err(ChainError::MerkleMismatch));

        assert_eq!(v.apply_block(good.clone()), Ok(ChainEvent::Extended));
        assert_eq!(v.apply_block(good), Ok(ChainEvent::AlreadyKnown));
    }

    #[test]
    fn payload_changes_crosschain_subroot() {
        use crate::confirmation::CrossChainSegment;
        let pg = BlockHeader::genesis(ChainId::Producer);
        let mut headers = Vec::new();
        let mut p = pg.clone();
        for i in 0..3 {
            let b = seal_block(&p, vec![], None, 0, i, MAX).unwrap();
            p = b.header.clone();
            headers.push(b.header);
        }
        let cg = BlockHeader::genesis(ChainId::Consumer);
        let with = seal_block(&cg, vec![], Some(CrossChainSegment::new(headers, vec![])), 0, 1, MAX).unwrap();
        let without = seal_block(&cg, vec![], None, 0, 1, MAX).unwrap();
        assert_ne!(with.compute_merkle().crosschain_subroot, without.compute_merkle().crosschain_subroot);
        assert_eq!(with.compute_merkle().internal_subroot, without.compute_merkle().internal_subroot);
        assert_ne!(with.header.merkle_root, without.header.merkle_root);
    }

    #[test]
    fn transaction_round_trip_and_ids() {
        let tx = Transaction::new(
            7,
            TxPayload::Invoke { contract_id: Hash256([3; 32]), method: "run".into(), params: vec![1, -2] },
            4,
        );
        let claimed = tx.clone().with_claimed_result(vec![0, 1, 2]);
        assert_eq!(tx.id(), claimed.id());
        assert_ne!(tx.commitment(), claimed.commitment());
        for t in [tx, claimed] {
            let bytes = t.encode();
            let mut r = Reader::new(&bytes);
            assert_eq!(Transaction::decode_from(&mut r).unwrap(), t);
            r.finish().unwrap();
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn sealed_chain_is_hash_linked(k in 1usize..12) {
            let mut v = view();
            let g = v.genesis().header.clone();
            let blocks = extend(&mut v, &g, k, 3);
            for w in blocks.windows(2) {
                proptest::prop_assert_eq!(hash_header(&w[0].header), w[1].header.parent);
            }
        }

        #[test]
        fn fork_choice_is_replay_deterministic(script in proptest::collection::vec((0usize..6, 0u64..4), 1..24)) {
            // build a random block tree, then replay the same arrival order
            let mut v = view();
            let mut all = vec![v.genesis().clone()];
            let mut order = Vec::new();
            for (i, (pick, _)) in script.iter().enumerate() {
                let parent = all[pick % all.len()].header.clone();
                let b = child(&parent, i as u64);
                let before_height = v.height();
                let before_canonical: Vec<_> = v.canonical_hashes().to_vec();
                let ev = v.apply_block(b.clone()).unwrap();
                if let ChainEvent::Rebranch { rolled_back, .. } = &ev {
                    proptest::prop_assert!(v.height() > before_height);
                    for r in rolled_back {
                        proptest::prop_assert!(!v.is_canonical(r));
                        proptest::prop_assert!(before_canonical.contains(r));
                    }
                }
                proptest::prop_assert_eq!(choose_head(&v), v.canonical_head());
                all.push(b.clone());
                order.push(b);
            }
            let mut replay = view();
            for b in &order {
                replay.apply_block(b.clone()).unwrap();
            }
            proptest::prop_assert_eq!(replay.canonical_head(), v.canonical_head());
        }
    }
}
