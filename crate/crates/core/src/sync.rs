//! Producer → consumer propagation of headers and proven contract
//! transactions.
//!
//! A consumer node keeps a [`HeaderImportStore`]: a gap-free, hash-linked
//! list of producer headers starting at the producer genesis. Contract
//! transactions arrive as [`CrossTxBundle`]s carrying a Merkle path into
//! the internal subtree of an imported header.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Block, BlockHeader, ChainView, Transaction, HEADER_SIZE};
use crate::encoding::{DecodeError, Reader, Writer};
use crate::merkle::{build_dual_merkle, verify_merkle_proof, MerkleProof, Subtree};
use crate::Hash256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyncError {
    #[error("requested heights {from}..={to} outside canonical chain of height {tip}")]
    RangeOutOfBounds { from: u64, to: u64, tip: u64 },
    #[error("gap in header batch: height {missing_height} missing")]
    GapDetected { missing_height: u64 },
    #[error("header at height {height} does not link to its predecessor")]
    BadLink { height: u64 },
    #[error("header at height {height} fails proof of work")]
    BadProofOfWork { height: u64 },
    #[error("bundle {index} references unknown producer block {block}")]
    UnknownBlock { index: usize, block: Hash256 },
    #[error("bundle {index} carries an invalid inclusion proof")]
    BadProof { index: usize },
    #[error("malformed sync message: {0}")]
    Decode(#[from] DecodeError),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Outcome of a successful header import.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub accepted: usize,
    pub last_height: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderImportStore {
    headers: Vec<BlockHeader>,
    index: HashMap<Hash256, usize>,
    min_difficulty: u16,
}

impl HeaderImportStore {
    pub fn new(genesis: BlockHeader, min_difficulty: u16) -> Self {
        let mut index = HashMap::new();
        index.insert(genesis.hash(), 0);
        HeaderImportStore { headers: vec![genesis], index, min_difficulty }
    }

    pub fn headers(&self) -> &[BlockHeader] {
        &self.headers
    }

    pub fn last(&self) -> &BlockHeader {
        self.headers.last().expect("store holds genesis")
    }

    pub fn last_height(&self) -> u64 {
        self.last().height
    }

    pub fn min_difficulty(&self) -> u16 {
        self.min_difficulty
    }

    pub fn header_by_hash(&self, hash: &Hash256) -> Option<&BlockHeader> {
        self.index.get(hash).map(|&i| &self.headers[i])
    }

    pub fn header_at(&self, height: u64) -> Option<&BlockHeader> {
        self.headers.get(height as usize)
    }

    pub fn contains(&self, hash: &Hash256) -> bool {
        self.index.contains_key(hash)
    }

    /// Bytes held: canonical header encodings.
    pub fn stored_bytes(&self) -> u64 {
        (self.headers.len() * HEADER_SIZE) as u64
    }

    /// Checks that `headers` continue `prev` link by link.
    pub(crate) fn check_continuation(
        prev: &BlockHeader,
        headers: &[BlockHeader],
        min_difficulty: u16,
    ) -> Result<(), SyncError> {
        let mut prev_hash = prev.hash();
        let mut prev_height = prev.height;
        for h in headers {
            let expected = prev_height + 1;
            if h.height > expected {
                return Err(SyncError::GapDetected { missing_height: expected });
            }
            if h.height < expected || h.parent != prev_hash || h.chain_id != prev.chain_id {
                return Err(SyncError::BadLink { height: h.height });
            }
            if h.difficulty_bits < min_difficulty || !h.meets_own_difficulty() {
                return Err(SyncError::BadProofOfWork { height: h.height });
            }
            prev_hash = h.hash();
            prev_height = h.height;
        }
        Ok(())
    }

    /// Appends `headers` iff the whole batch continues the stored chain.
    /// On any error the store is left unchanged.
    pub fn import_headers(&mut self, headers: &[BlockHeader]) -> Result<ImportReport, SyncError> {
        Self::check_continuation(self.last(), headers, self.min_difficulty)?;
        for h in headers {
            self.index.insert(h.hash(), self.headers.len());
            self.headers.push(h.clone());
        }
        Ok(ImportReport { accepted: headers.len(), last_height: self.last_height() })
    }

    /// Swaps the branch above `fork_height` for `headers`. Only the
    /// confirmation conflict flow calls this, after checking the new branch
    /// is strictly longer.
    pub(crate) fn replace_above(&mut self, fork_height: u64, headers: &[BlockHeader]) -> Result<(), SyncError> {
        let base = self
            .header_at(fork_height)
            .ok_or(SyncError::RangeOutOfBounds { from: fork_height, to: fork_height, tip: self.last_height() })?;
        Self::check_continuation(base, headers, self.min_difficulty)?;
        for h in self.headers.drain(fork_height as usize + 1..) {
            self.index.remove(&h.hash());
        }
        for h in headers {
            self.index.insert(h.hash(), self.headers.len());
            self.headers.push(h.clone());
        }
        Ok(())
    }
}

/// Canonical-branch headers with heights `from..=to`.
pub fn export_headers(chain: &ChainView, from: u64, to: u64) -> Result<Vec<BlockHeader>, SyncError> {
    let tip = chain.height();
    if from > to || to > tip {
        return Err(SyncError::RangeOutOfBounds { from, to, tip });
    }
    Ok((from..=to).map(|h| chain.canonical_at(h).expect("height checked").header.clone()).collect())
}

/// A producer transaction with its inclusion proof.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTxBundle {
    pub tx: Transaction,
    pub block_hash: Hash256,
    pub proof: MerkleProof,
}

impl CrossTxBundle {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.tx.encode());
        w.raw(self.block_hash.as_bytes());
        self.proof.encode_into(&mut w);
        w.finish()
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tx_bytes = r.bytes()?;
        let mut tr = Reader::new(tx_bytes);
        let tx = Transaction::decode_from(&mut tr)?;
        tr.finish()?;
        Ok(CrossTxBundle { tx, block_hash: r.hash()?, proof: MerkleProof::decode_from(r)? })
    }

    /// Leaf value committed in a consumer block's crosschain subtree.
    pub fn leaf_hash(&self) -> Hash256 {
        Hash256::digest(&self.encode())
    }

    /// Checks the proof against `header`, which must be the referenced block.
    pub fn verifies_against(&self, header: &BlockHeader) -> bool {
        header.hash() == self.block_hash
            && self.proof.subtree == Subtree::Internal
            && verify_merkle_proof(self.tx.commitment().as_bytes(), &self.proof, &header.merkle_root)
    }
}

/// Bundles for every transaction in `block` matching `selector`, in block order.
pub fn export_cross_txs(block: &Block, selector: impl Fn(&Transaction) -> bool) -> Vec<CrossTxBundle> {
    let tree = build_dual_merkle(&block.internal_leaves(), &block.crosschain_leaves());
    let block_hash = block.hash();
    block
        .internal_txs
        .iter()
        .zip(tree.internal_proofs)
        .filter(|(tx, _)| selector(tx))
        .map(|(tx, proof)| CrossTxBundle { tx: tx.clone(), block_hash, proof })
        .collect()
}

/// Verifies every bundle against imported headers and returns them in
/// producer order: block height, then position within the block.
pub fn verify_cross_bundles<'a>(
    store: &HeaderImportStore,
    bundles: &'a [CrossTxBundle],
) -> Result<Vec<&'a CrossTxBundle>, SyncError> {
    let mut keyed = Vec::with_capacity(bundles.len());
    for (index, b) in bundles.iter().enumerate() {
        let header = store
            .header_by_hash(&b.block_hash)
            .ok_or(SyncError::UnknownBlock { index, block: b.block_hash })?;
        if !b.verifies_against(header) {
            return Err(SyncError::BadProof { index });
        }
        keyed.push(((header.height, b.proof.leaf_index), b));
    }
    keyed.sort_by_key(|(k, _)| *k);
    Ok(keyed.into_iter().map(|(_, b)| b).collect())
}

/// Accepted transactions in producer order; fails as a whole on the first
/// bad bundle.
pub fn import_cross_txs(store: &HeaderImportStore, bundles: &[CrossTxBundle]) -> Result<Vec<Transaction>, SyncError> {
    Ok(verify_cross_bundles(store, bundles)?.into_iter().map(|b| b.tx.clone()).collect())
}

/// Wire message between producer-facing and consumer-facing nodes:
/// `message_type(1) ‖ count(4) ‖ items`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SyncMessage {
    /// Type `0x01`; items are raw 91-byte headers.
    Headers(Vec<BlockHeader>),
    /// Type `0x02`; items are u32-length-prefixed bundle encodings.
    CrossTxs(Vec<CrossTxBundle>),
}

impl SyncMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            SyncMessage::Headers(hs) => {
                w.u8(0x01).u32(hs.len() as u32);
                for h in hs {
                    w.raw(&h.encode());
                }
            }
            SyncMessage::CrossTxs(bs) => {
                w.u8(0x02).u32(bs.len() as u32);
                for b in bs {
                    w.bytes(&b.encode());
                }
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SyncError> {
        let mut r = Reader::new(bytes);
        let kind = r.u8()?;
        let count = r.u32()? as usize;
        let msg = match kind {
            0x01 => {
                if count > r.remaining() / HEADER_SIZE {
                    return Err(DecodeError::BadLength(count).into());
                }
                SyncMessage::Headers((0..count).map(|_| BlockHeader::decode_from(&mut r)).collect::<Result<_, _>>()?)
            }
            0x02 => {
                let mut out = Vec::new();
                for _ in 0..count {
                    let item = r.bytes()?;
                    let mut ir = Reader::new(item);
                    out.push(CrossTxBundle::decode_from(&mut ir)?);
                    ir.finish()?;
                }
                SyncMessage::CrossTxs(out)
            }
            tag => return Err(DecodeError::BadTag { what: "message type", tag }.into()),
        };
        r.finish()?;
        Ok(msg)
    }

    pub fn write_to(&self, path: &Path) -> Result<(), SyncError> {
        std::fs::write(path, self.encode()).map_err(|e| SyncError::Io(e.to_string()))
    }

    pub fn read_from(path: &Path) -> Result<Self, SyncError> {
        let bytes = std::fs::read(path).map_err(|e| SyncError::Io(e.to_string()))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{seal_block, ChainId, TxKind, TxPayload};
    use crate::vm::constant_contract;

    const MAX: usize = 1 << 20;

    fn producer(n: usize) -> ChainView {
        let mut v = ChainView::with_genesis(ChainId::Producer, 1, MAX);
        for i in 0..n {
            let tip = v.tip().header.clone();
            let txs = vec![Transaction::new(i as u64, TxPayload::Transfer { to: 0, amount: 1 }, i as u64)];
            v.apply_block(seal_block(&tip, txs, None, 1, 10 * (i as u64 + 1), MAX).unwrap()).unwrap();
        }
        v
    }

    fn store_for(v: &ChainView) -> HeaderImportStore {
        HeaderImportStore::new(v.genesis().header.clone(), 1)
    }

    fn mixed_block(parent: &BlockHeader) -> Block {
        let cid = Hash256([5; 32]);
        let invoke = |n| {
            Transaction::new(1, TxPayload::Invoke { contract_id: cid, method: "get".into(), params: vec![] }, n)
                .with_claimed_result(vec![0, 0, 0, 0, 0, 0, 0, n as u8])
        };
        let transfer = |n| Transaction::new(2, TxPayload::Transfer { to: 3, amount: n }, n);
        let txs = vec![transfer(1), invoke(2), transfer(3), invoke(4), transfer(5)];
        seal_block(parent, txs, None, 1, 1, MAX).unwrap()
    }

    #[test]
    fn export_single_and_range() {
        let v = producer(9);
        assert_eq!(export_headers(&v, 0, 0).unwrap(), vec![v.genesis().header.clone()]);
        let hs = export_headers(&v, 3, 5).unwrap();
        assert_eq!(hs.len(), 3);
        assert_eq!(hs[1].parent, hs[0].hash());
        assert_eq!(hs[2].parent, hs[1].hash());
        assert!(matches!(export_headers(&v, 5, 10), Err(SyncError::RangeOutOfBounds { .. })));
        assert!(matches!(export_headers(&v, 5, 4), Err(SyncError::RangeOutOfBounds { .. })));
    }

    #[test]
    fn export_follows_canonical_branch_after_rebranch() {
        let mut v = producer(4);
        let base = v.canonical_at(1).unwrap().header.clone();
        let mut p = base;
        let mut fork = Vec::new();
        for i in 0..4 {
            let b = seal_block(&p, vec![], None, 1, 1000 + i, MAX).unwrap();
            p = b.header.clone();
            fork.push(b.clone());
            v.apply_block(b).unwrap();
        }
        let hs = export_headers(&v, 2, 5).unwrap();
        let walked: Vec<_> = fork.iter().map(|b| b.header.clone()).collect();
        assert_eq!(hs, walked);
    }

    #[test]
    fn import_appends_linked_batch() {
        let v = producer(6);
        let mut s = store_for(&v);
        let r = s.import_headers(&export_headers(&v, 1, 3).unwrap()).unwrap();
        assert_eq!(r, ImportReport { accepted: 3, last_height: 3 });
        let r = s.import_headers(&export_headers(&v, 4, 6).unwrap()).unwrap();
        assert_eq!(r.last_height, 6);
        assert_eq!(s.import_headers(&[]).unwrap().accepted, 0);
    }

    #[test]
    fn import_rejects_gap_link_and_pow() {
        let v = producer(6);
        let mut s = store_for(&v);
        let before = s.clone();
        let mut batch = export_headers(&v, 1, 6).unwrap();
        batch.remove(2);
        assert_eq!(s.import_headers(&batch), Err(SyncError::GapDetected { missing_height: 3 }));
        assert_eq!(s, before);

        let mut batch = export_headers(&v, 1, 3).unwrap();
        batch[0].parent = Hash256([1; 32]);
        assert_eq!(s.import_headers(&batch), Err(SyncError::BadLink { height: 1 }));

        // starts past the tip
        let batch = export_headers(&v, 2, 3).unwrap();
        assert_eq!(s.import_headers(&batch), Err(SyncError::GapDetected { missing_height: 1 }));

        let mut strict = HeaderImportStore::new(v.genesis().header.clone(), 30);
        assert_eq!(
            strict.import_headers(&export_headers(&v, 1, 1).unwrap()),
            Err(SyncError::BadProofOfWork { height: 1 })
        );
        assert_eq!(s, before);
    }

    #[test]
    fn exporting_selected_kinds() {
        let g = BlockHeader::genesis(ChainId::Producer);
        let b = mixed_block(&g);
        let bundles = export_cross_txs(&b, |t| t.kind().is_contract_kind());
        assert_eq!(bundles.len(), 2);
        assert!(bundles.iter().all(|x| x.tx.kind() == TxKind::Invoke));
        for x in &bundles {
            assert!(x.verifies_against(&b.header));
        }
        let empty = seal_block(&g, vec![], None, 1, 1, MAX).unwrap();
        assert!(export_cross_txs(&empty, |_| true).is_empty());
    }

    #[test]
    fn importing_bundles() {
        let mut v = ChainView::with_genesis(ChainId::Producer, 1, MAX);
        let g = v.genesis().header.clone();
        let b1 = mixed_block(&g);
        v.apply_block(b1.clone()).unwrap();
        let deploy = Transaction::new(9, TxPayload::Deploy { code: constant_contract(1, false), init_params: vec![] }, 0);
        let b2 = seal_block(&b1.header, vec![deploy], None, 1, 2, MAX).unwrap();
        v.apply_block(b2.clone()).unwrap();

        let mut s = store_for(&v);
        let mut bundles = export_cross_txs(&b2, |t| t.kind().is_contract_kind());
        bundles.extend(export_cross_txs(&b1, |t| t.kind().is_contract_kind()));
        assert_eq!(
            import_cross_txs(&s, &bundles),
            Err(SyncError::UnknownBlock { index: 0, block: b2.hash() })
        );
        s.import_headers(&export_headers(&v, 1, 2).unwrap()).unwrap();
        let txs = import_cross_txs(&s, &bundles).unwrap();
        // producer order restored: block 1 invokes first, then block 2 deploy
        let expected: Vec<_> = b1.internal_txs.iter().filter(|t| t.kind() == TxKind::Invoke).cloned()
            .chain(b2.internal_txs.iter().cloned())
            .collect();
        assert_eq!(txs, expected);
    }

    #[test]
    fn flipped_bundle_bytes_fail() {
        let mut v = ChainView::with_genesis(ChainId::Producer, 1, MAX);
        let g = v.genesis().header.clone();
        let b = mixed_block(&g);
        v.apply_block(b.clone()).unwrap();
        let mut s = store_for(&v);
        s.import_headers(std::slice::from_ref(&b.header)).unwrap();
        let bundle = export_cross_txs(&b, |t| t.kind() == TxKind::Invoke).remove(0);
        let bytes = bundle.encode();
        let mut rejected = 0;
        for i in 0..bytes.len() {
            for bit in [0x01u8, 0x80] {
                let mut m = bytes.clone();
                m[i] ^= bit;
                let mut r = Reader::new(&m);
                let Ok(decoded) = CrossTxBundle::decode_from(&mut r) else { rejected += 1; continue };
                if r.finish().is_err() || decoded == bundle {
                    rejected += 1;
                    continue;
                }
                let res = import_cross_txs(&s, std::slice::from_ref(&decoded));
                assert!(
                    matches!(res, Err(SyncError::BadProof { .. }) | Err(SyncError::UnknownBlock { .. })),
                    "byte {i} bit {bit:#x} accepted"
                );
                rejected += 1;
            }
        }
        assert_eq!(rejected, bytes.len() * 2);
    }

    #[test]
    fn payload_flip_is_bad_proof() {
        let mut v = ChainView::with_genesis(ChainId::Producer, 1, MAX);
        let g = v.genesis().header.clone();
        let b = mixed_block(&g);
        v.apply_block(b.clone()).unwrap();
        let mut s = store_for(&v);
        s.import_headers(std::slice::from_ref(&b.header)).unwrap();
        let mut bundle = export_cross_txs(&b, |t| t.kind() == TxKind::Invoke).remove(0);
        bundle.tx.claimed_result.as_mut().unwrap()[7] ^= 1;
        assert_eq!(import_cross_txs(&s, &[bundle]), Err(SyncError::BadProof { index: 0 }));
    }

    #[test]
    fn sync_message_file_round_trip() {
        let v = producer(3);
        let msg = SyncMessage::Headers(export_headers(&v, 0, 3).unwrap());
        let g = BlockHeader::genesis(ChainId::Producer);
        let bmsg = SyncMessage::CrossTxs(export_cross_txs(&mixed_block(&g), |_| true));
        let dir = std::env::temp_dir().join(format!("xchainlab-sync-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for (i, m) in [msg, bmsg].into_iter().enumerate() {
            let p = dir.join(format!("m{i}.bin"));
            m.write_to(&p).unwrap();
            assert_eq!(SyncMessage::read_from(&p).unwrap(), m);
        }
        let enc = SyncMessage::Headers(vec![]).encode();
        assert_eq!(enc, vec![1, 0, 0, 0, 0]);
        assert!(SyncMessage::decode(&[9, 0, 0, 0, 0]).is_err());
        std::fs::remove_dir_all(dir).ok();
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]
        #[test]
        fn every_interior_removal_is_a_gap(n in 3usize..=32) {
            let v = producer(n);
            let batch = export_headers(&v, 1, n as u64).unwrap();
            for m in 1..n - 1 {
                let mut s = store_for(&v);
                let mut cut = batch.clone();
                cut.remove(m);
                let is_gap = matches!(s.import_headers(&cut), Err(SyncError::GapDetected { .. }));
                proptest::prop_assert!(is_gap);
                proptest::prop_assert_eq!(s.last_height(), 0);
            }
        }
    }
}
