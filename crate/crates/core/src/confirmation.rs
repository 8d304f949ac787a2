//! Confirmation with proof.
//!
//! Producer headers and proven contract transactions are grouped into
//! [`CrossChainSegment`]s and mined into consumer blocks under the
//! crosschain subtree, so every consumer node shares one view of the
//! producer chain. Confirmed producer data is only ever replaced by a
//! strictly longer producer branch, recorded as a resolution segment.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{seal_block, Block, BlockHeader, ChainError, ChainView, Transaction, HEADER_SIZE};
use crate::encoding::{DecodeError, Reader, Writer};
use crate::scl::{ValidationOutcome, Verdict};
use crate::sync::{CrossTxBundle, HeaderImportStore, SyncError};
use crate::Hash256;

/// A contiguous run of producer headers plus bundles proven against them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossChainSegment {
    pub headers: Vec<BlockHeader>,
    pub cross_txs: Vec<CrossTxBundle>,
}

impl CrossChainSegment {
    pub fn new(headers: Vec<BlockHeader>, cross_txs: Vec<CrossTxBundle>) -> Self {
        CrossChainSegment { headers, cross_txs }
    }

    pub fn first_height(&self) -> Option<u64> {
        self.headers.first().map(|h| h.height)
    }

    pub fn last_height(&self) -> Option<u64> {
        self.headers.last().map(|h| h.height)
    }

    /// Crosschain-subtree leaves: header hashes, then bundle leaf hashes.
    pub fn leaves(&self) -> Vec<[u8; 32]> {
        self.headers
            .iter()
            .map(|h| h.hash().0)
            .chain(self.cross_txs.iter().map(|b| b.leaf_hash().0))
            .collect()
    }

    /// `count(2) ‖ headers ‖ count(2) ‖ bundles`, each bundle length-prefixed.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u16(self.headers.len() as u16);
        for h in &self.headers {
            w.raw(&h.encode());
        }
        w.u16(self.cross_txs.len() as u16);
        for b in &self.cross_txs {
            w.bytes(&b.encode());
        }
        w.finish()
    }

    pub fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let nh = r.u16()? as usize;
        let mut headers = Vec::with_capacity(nh);
        for _ in 0..nh {
            headers.push(BlockHeader::decode_from(r)?);
        }
        let nb = r.u16()? as usize;
        let mut cross_txs = Vec::with_capacity(nb);
        for _ in 0..nb {
            let bytes = r.bytes()?;
            let mut br = Reader::new(bytes);
            cross_txs.push(CrossTxBundle::decode_from(&mut br)?);
            br.finish()?;
        }
        Ok(CrossChainSegment { headers, cross_txs })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let s = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(s)
    }

    /// Every bundle proves against one of this segment's headers.
    pub fn bundles_verify(&self) -> bool {
        let by_hash: HashMap<Hash256, &BlockHeader> = self.headers.iter().map(|h| (h.hash(), h)).collect();
        self.cross_txs
            .iter()
            .all(|b| by_hash.get(&b.block_hash).is_some_and(|h| b.verifies_against(h)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub header_size: u64,
    pub max_block_size: u64,
    pub p_fake_avg: f64,
    pub delta: f64,
    /// Upper bound on segment mining span, simulated ms.
    pub beta_ms: u64,
    pub avg_block_time_ms: u64,
    pub confirm_depth: u64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            header_size: HEADER_SIZE as u64,
            max_block_size: 1 << 20,
            p_fake_avg: 0.3,
            delta: 0.01,
            beta_ms: 300_000,
            avg_block_time_ms: 10_000,
            confirm_depth: 6,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::InvalidConfig(m.to_string()));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0,1)");
        }
        if !(self.p_fake_avg >= 0.0 && self.p_fake_avg < 1.0) {
            return bad("p_fake_avg must lie in [0,1)");
        }
        if self.beta_ms == 0 {
            return bad("beta must be positive");
        }
        if self.avg_block_time_ms == 0 {
            return bad("avg_block_time must be positive");
        }
        if self.header_size == 0 {
            return bad("header_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
    R3,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::R1 => "R1 (segment fits in one block)",
            Rule::R2 => "R2 (rebranch probability below delta)",
            Rule::R3 => "R3 (segment span below beta)",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid segment config: {0}")]
    InvalidConfig(String),
    #[error("infeasible: n = 1 violates {0}")]
    Infeasible(Rule),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub n: u64,
    /// Largest n with `n · header_size < max_block_size`.
    pub r1_max: u64,
    /// Largest n with `n · avg_block_time < beta`.
    pub r3_max: u64,
    /// Smallest n with `p_fake_avg^n < delta`, if one exists within the caps
    /// search range.
    pub r2_min: Option<u64>,
    pub r2_met: bool,
}

const R2_SEARCH_LIMIT: u64 = 1_000_000;

/// Smallest `n ≥ 1` meeting R2 within the R1/R3 caps, else the largest
/// feasible `n` with `r2_met = false`.
pub fn plan_segment_length(cfg: &SegmentConfig) -> Result<SegmentPlan, PlanError> {
    cfg.validate()?;
    let r1_max = (cfg.max_block_size.saturating_sub(1)) / cfg.header_size;
    let r3_max = (cfg.beta_ms - 1) / cfg.avg_block_time_ms;
    if r1_max < 1 {
        return Err(PlanError::Infeasible(Rule::R1));
    }
    if r3_max < 1 {
        return Err(PlanError::Infeasible(Rule::R3));
    }
    let cap = r1_max.min(r3_max);
    let mut r2_min = None;
    let mut pow = 1.0f64;
    for n in 1..=R2_SEARCH_LIMIT {
        pow *= cfg.p_fake_avg;
        if pow < cfg.delta {
            r2_min = Some(n);
            break;
        }
    }
    let (n, r2_met) = match r2_min {
        Some(m) if m <= cap => (m, true),
        _ => (cap, false),
    };
    Ok(SegmentPlan { n, r1_max, r3_max, r2_min, r2_met })
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfirmError {
    #[error("segment rejected: {0}")]
    SegmentRejected(String),
    #[error("block {0} is not on the canonical branch")]
    NotOnCanonicalBranch(Hash256),
    #[error("segment does not attach to confirmed producer data")]
    Disconnected,
    #[error("resolution branch of {incoming} headers does not exceed confirmed branch of {confirmed}")]
    NotLonger { incoming: u64, confirmed: u64 },
    #[error("header store diverges from confirmed producer data at height {0}")]
    StoreDiverged(u64),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmedSegment {
    pub consumer_block: Hash256,
    pub consumer_height: u64,
    pub segment: CrossChainSegment,
    /// Replaces confirmed headers after a producer rebranch.
    pub resolution: bool,
}

/// Producer data confirmed along one consumer branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfirmationState {
    /// Confirmed producer headers by height, genesis first.
    confirmed: Vec<BlockHeader>,
    segments: Vec<ConfirmedSegment>,
    min_difficulty: u16,
}

impl ConfirmationState {
    pub fn new(producer_genesis: BlockHeader, min_difficulty: u16) -> Self {
        ConfirmationState { confirmed: vec![producer_genesis], segments: Vec::new(), min_difficulty }
    }

    /// Rebuilds the state from the consumer's canonical branch.
    pub fn from_chain(
        consumer: &ChainView,
        producer_genesis: BlockHeader,
        min_difficulty: u16,
    ) -> Result<Self, ConfirmError> {
        let mut st = Self::new(producer_genesis, min_difficulty);
        for b in consumer.canonical_blocks() {
            if let Some(seg) = &b.crosschain_payload {
                st.apply_segment(b.hash(), b.header.height, seg.clone())?;
            }
        }
        Ok(st)
    }

    pub fn confirmed_headers(&self) -> &[BlockHeader] {
        &self.confirmed
    }

    pub fn segments(&self) -> &[ConfirmedSegment] {
        &self.segments
    }

    pub fn tip(&self) -> (u64, Hash256) {
        let h = self.confirmed.last().expect("state holds genesis");
        (h.height, h.hash())
    }

    pub fn tip_header(&self) -> &BlockHeader {
        self.confirmed.last().expect("state holds genesis")
    }

    fn check_segment(&self, segment: &CrossChainSegment) -> Result<bool, ConfirmError> {
        let first = segment
            .headers
            .first()
            .ok_or_else(|| ConfirmError::SegmentRejected("empty segment".into()))?;
        if !segment.bundles_verify() {
            return Err(ConfirmError::SegmentRejected("bundle proof does not verify".into()));
        }
        let (tip_h, tip_hash) = self.tip();
        if first.parent == tip_hash {
            HeaderImportStore::check_continuation(self.tip_header(), &segment.headers, self.min_difficulty)?;
            return Ok(false);
        }
        let fork = first.height.checked_sub(1).ok_or(ConfirmError::Disconnected)?;
        let base = self.confirmed.get(fork as usize).ok_or(ConfirmError::Disconnected)?;
        if base.hash() != first.parent {
            return Err(ConfirmError::Disconnected);
        }
        let confirmed_len = tip_h - fork;
        let incoming_len = segment.headers.len() as u64;
        if incoming_len <= confirmed_len {
            return Err(ConfirmError::NotLonger { incoming: incoming_len, confirmed: confirmed_len });
        }
        HeaderImportStore::check_continuation(base, &segment.headers, self.min_difficulty)?;
        Ok(true)
    }

    /// Records a segment mined in `consumer_block`.
    pub fn apply_segment(
        &mut self,
        consumer_block: Hash256,
        consumer_height: u64,
        segment: CrossChainSegment,
    ) -> Result<(), ConfirmError> {
        let resolution = self.check_segment(&segment)?;
        let first = segment.headers[0].height as usize;
        self.confirmed.truncate(first);
        self.confirmed.extend(segment.headers.iter().cloned());
        self.segments.push(ConfirmedSegment { consumer_block, consumer_height, segment, resolution });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assembly {
    Ready(CrossChainSegment),
    NotReady,
}

/// Takes exactly `n` imported headers past the confirmed tip, or fewer when
/// `force_on_crosschain_data` is set and a pending bundle references one of
/// them. Pending bundles referencing segment headers ride along in
/// producer order.
pub fn assemble_segment(
    store: &HeaderImportStore,
    state: &ConfirmationState,
    n: u64,
    pending: &[CrossTxBundle],
    force_on_crosschain_data: bool,
) -> Result<Assembly, ConfirmError> {
    let (tip_h, tip_hash) = state.tip();
    match store.header_at(tip_h) {
        Some(h) if h.hash() == tip_hash => {}
        _ => return Err(ConfirmError::StoreDiverged(tip_h)),
    }
    let available = store.last_height().saturating_sub(tip_h);
    let take = if available >= n {
        n
    } else {
        let candidate: Vec<Hash256> = ((tip_h + 1)..=store.last_height())
            .map(|h| store.header_at(h).expect("within store").hash())
            .collect();
        if force_on_crosschain_data && pending.iter().any(|b| candidate.contains(&b.block_hash)) {
            available
        } else {
            return Ok(Assembly::NotReady);
        }
    };
    if take == 0 {
        return Ok(Assembly::NotReady);
    }
    let headers: Vec<BlockHeader> =
        ((tip_h + 1)..=(tip_h + take)).map(|h| store.header_at(h).expect("within store").clone()).collect();
    let pos: HashMap<Hash256, u64> = headers.iter().map(|h| (h.hash(), h.height)).collect();
    let mut bundles: Vec<&CrossTxBundle> = pending.iter().filter(|b| pos.contains_key(&b.block_hash)).collect();
    bundles.sort_by_key(|b| (pos[&b.block_hash], b.proof.leaf_index));
    Ok(Assembly::Ready(CrossChainSegment::new(headers, bundles.into_iter().cloned().collect())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MineParams {
    pub difficulty_bits: u16,
    pub timestamp: u64,
    pub header_size: u64,
}

/// Seals a consumer block carrying `segment`. Every result-bearing bundle
/// must have a `Match` outcome and the segment must continue (or
/// legitimately resolve) confirmed producer data.
pub fn mine_confirmation(
    consumer: &ChainView,
    state: &ConfirmationState,
    segment: CrossChainSegment,
    outcomes: &[ValidationOutcome],
    internal_txs: Vec<Transaction>,
    params: &MineParams,
) -> Result<Block, ConfirmError> {
    let reject = |m: String| ConfirmError::SegmentRejected(m);
    state.check_segment(&segment).map_err(|e| match e {
        ConfirmError::SegmentRejected(m) => reject(m),
        other => reject(other.to_string()),
    })?;
    if segment.headers.len() as u64 * params.header_size >= consumer.max_block_size() as u64 {
        return Err(reject("segment violates R1".into()));
    }
    let verdicts: HashMap<Hash256, &Verdict> = outcomes.iter().map(|o| (o.tx_id, &o.verdict)).collect();
    for b in &segment.cross_txs {
        if !b.tx.kind().carries_result() {
            continue;
        }
        let id = b.tx.id();
        match verdicts.get(&id) {
            Some(Verdict::Match) => {}
            Some(v) => return Err(reject(format!("transaction {} validated as {}", id.short(), v.label()))),
            None => return Err(reject(format!("transaction {} not validated", id.short()))),
        }
    }
    let tip = consumer.tip().header.clone();
    Ok(seal_block(
        &tip,
        internal_txs,
        Some(segment),
        params.difficulty_bits.max(consumer.min_difficulty()),
        params.timestamp,
        consumer.max_block_size(),
    )?)
}

/// Canonical successors of `block_hash`.
pub fn confirmation_depth(consumer: &ChainView, block_hash: &Hash256) -> Result<u64, ConfirmError> {
    if !consumer.is_canonical(block_hash) {
        return Err(ConfirmError::NotOnCanonicalBranch(*block_hash));
    }
    let h = consumer.get(block_hash).expect("canonical block stored").header.height;
    Ok(consumer.height() - h)
}

pub fn is_confirmed(consumer: &ChainView, block_hash: &Hash256, confirm_depth: u64) -> Result<bool, ConfirmError> {
    Ok(confirmation_depth(consumer, block_hash)? >= confirm_depth)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConflictReport {
    NoConflict,
    Conflict { fork_height: u64, confirmed_hash: Hash256, incoming_hash: Hash256 },
    /// The batch does not attach to any confirmed header.
    Disconnected,
}

/// Compares a hash-linked producer batch with confirmed headers.
pub fn detect_producer_conflict(state: &ConfirmationState, incoming: &[BlockHeader]) -> ConflictReport {
    let Some(first) = incoming.first() else {
        return ConflictReport::NoConflict;
    };
    let parent_ok = first
        .height
        .checked_sub(1)
        .and_then(|p| state.confirmed.get(p as usize))
        .is_some_and(|h| h.hash() == first.parent);
    if !parent_ok {
        return ConflictReport::Disconnected;
    }
    for h in incoming {
        match state.confirmed.get(h.height as usize) {
            None => break,
            Some(c) => {
                let (ch, ih) = (c.hash(), h.hash());
                if ch != ih {
                    return ConflictReport::Conflict { fork_height: h.height, confirmed_hash: ch, incoming_hash: ih };
                }
            }
        }
    }
    ConflictReport::NoConflict
}

/// Builds the resolution segment for a conflicting branch: the incoming
/// headers from `fork_height` up, accepted only when strictly longer than
/// the confirmed branch past the fork. The header store adopts the branch.
pub fn resolve_conflict(
    store: &mut HeaderImportStore,
    state: &ConfirmationState,
    incoming: &[BlockHeader],
    pending: &[CrossTxBundle],
) -> Result<CrossChainSegment, ConfirmError> {
    let fork_height = match detect_producer_conflict(state, incoming) {
        ConflictReport::Conflict { fork_height, .. } => fork_height,
        ConflictReport::NoConflict => return Err(ConfirmError::SegmentRejected("no conflict to resolve".into())),
        ConflictReport::Disconnected => return Err(ConfirmError::Disconnected),
    };
    let branch: Vec<BlockHeader> = incoming.iter().filter(|h| h.height >= fork_height).cloned().collect();
    let (tip_h, _) = state.tip();
    let confirmed_len = tip_h - fork_height + 1;
    if (branch.len() as u64) <= confirmed_len {
        return Err(ConfirmError::NotLonger { incoming: branch.len() as u64, confirmed: confirmed_len });
    }
    let by_hash: HashMap<Hash256, &BlockHeader> = branch.iter().map(|h| (h.hash(), h)).collect();
    let mut bundles: Vec<&CrossTxBundle> = pending
        .iter()
        .filter(|b| by_hash.get(&b.block_hash).is_some_and(|h| b.verifies_against(h)))
        .collect();
    bundles.sort_by_key(|b| (by_hash[&b.block_hash].height, b.proof.leaf_index));
    let segment = CrossChainSegment::new(branch, bundles.into_iter().cloned().collect());
    state.check_segment(&segment)?;
    store.replace_above(fork_height - 1, &segment.headers)?;
    Ok(segment)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub first_height: u64,
    pub last_height: u64,
    pub headers: usize,
    pub bundles: usize,
    pub consumer_block: Hash256,
    pub consumer_height: u64,
    pub depth: u64,
    pub resolution: bool,
}

pub fn confirmation_log(consumer: &ChainView, state: &ConfirmationState) -> Vec<LogEntry> {
    state
        .segments
        .iter()
        .map(|s| LogEntry {
            first_height: s.segment.first_height().unwrap_or(0),
            last_height: s.segment.last_height().unwrap_or(0),
            headers: s.segment.headers.len(),
            bundles: s.segment.cross_txs.len(),
            consumer_block: s.consumer_block,
            consumer_height: s.consumer_height,
            depth: confirmation_depth(consumer, &s.consumer_block).unwrap_or(0),
            resolution: s.resolution,
        })
        .collect()
}

/// One JSON object per line.
pub fn write_confirmation_log<W: Write>(entries: &[LogEntry], mut out: W) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
