//! Contract-level validation of producer results on the consumer side.
//!
//! Producer contracts are re-executed inside an [`IsolatedEnv`], separate
//! from any consumer-native contracts, and each recomputed result is
//! compared byte-for-byte with the result the producer recorded. Several
//! consumer nodes may share one storage node's producer data
//! ([`collective_validate`]); they fetch what they need through a narrow
//! query interface and keep no producer data themselves.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{BlockHeader, TxKind, TxPayload};
use crate::sync::{verify_cross_bundles, CrossTxBundle, HeaderImportStore, SyncError};
use crate::vm::{self, ContractInstance, InvocationResult, VmError};
use crate::Hash256;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    Local,
    SharedStore(NodeId),
}

/// How a recomputed result is compared with the producer's record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CompareMode {
    /// Claimed bytes are the raw result.
    #[default]
    Bytes,
    /// Claimed bytes are SHA-256 of the result, for chains that store only
    /// result hashes.
    Hash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Match,
    Mismatch,
    /// Validation could not run; never counted as a detected cheat.
    Inconclusive(String),
}

impl Verdict {
    pub fn label(&self) -> String {
        match self {
            Verdict::Match => "match".into(),
            Verdict::Mismatch => "mismatch".into(),
            Verdict::Inconclusive(r) => format!("inconclusive:{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub tx_id: Hash256,
    pub computed: Vec<u8>,
    pub claimed: Vec<u8>,
    pub verdict: Verdict,
    pub env_id: String,
    /// Simulated time of the validation.
    pub at_ms: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SclError {
    #[error("bundle is not a deployment")]
    NotADeployment,
    #[error("invalid contract code: {0}")]
    InvalidCode(String),
    #[error("no instance for contract {0}")]
    MissingInstance(Hash256),
    #[error("contract {0} already instantiated")]
    DuplicateInstance(Hash256),
    #[error("storage node {0} unavailable")]
    StorageNodeUnavailable(NodeId),
    #[error("shared resources {shared} exceed individual resources {individual}")]
    NegativeSavingsInput { individual: u64, shared: u64 },
    #[error(transparent)]
    Sync(#[from] SyncError),
}

/// Sandbox holding producer contract instances only.
#[derive(Debug, Clone)]
pub struct IsolatedEnv {
    env_id: String,
    instances: HashMap<Hash256, ContractInstance>,
    results: HashMap<Hash256, InvocationResult>,
    data_source: DataSource,
    mode: CompareMode,
}

impl IsolatedEnv {
    pub fn new(env_id: impl Into<String>, data_source: DataSource) -> Self {
        IsolatedEnv {
            env_id: env_id.into(),
            instances: HashMap::new(),
            results: HashMap::new(),
            data_source,
            mode: CompareMode::Bytes,
        }
    }

    pub fn with_mode(mut self, mode: CompareMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn data_source(&self) -> DataSource {
        self.data_source
    }

    pub fn instance(&self, contract_id: &Hash256) -> Option<&ContractInstance> {
        self.instances.get(contract_id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &ContractInstance> {
        self.instances.values()
    }

    /// Result lookup by invoking transaction id.
    pub fn query_result(&self, tx_id: &Hash256) -> Option<&InvocationResult> {
        self.results.get(tx_id)
    }

    fn compare(&self, tx_id: Hash256, computed: Vec<u8>, claimed: Option<&Vec<u8>>, now: u64) -> ValidationOutcome {
        let (claimed, verdict) = match claimed {
            None => (Vec::new(), Verdict::Inconclusive("no claimed result".into())),
            Some(c) => {
                let ok = match self.mode {
                    CompareMode::Bytes => *c == computed,
                    CompareMode::Hash => c.as_slice() == Hash256::digest(&computed).as_bytes(),
                };
                (c.clone(), if ok { Verdict::Match } else { Verdict::Mismatch })
            }
        };
        ValidationOutcome { tx_id, computed, claimed, verdict, env_id: self.env_id.clone(), at_ms: now }
    }

    fn inconclusive(&self, tx_id: Hash256, claimed: Option<&Vec<u8>>, reason: String, now: u64) -> ValidationOutcome {
        ValidationOutcome {
            tx_id,
            computed: Vec::new(),
            claimed: claimed.cloned().unwrap_or_default(),
            verdict: Verdict::Inconclusive(reason),
            env_id: self.env_id.clone(),
            at_ms: now,
        }
    }

    /// Creates the instance described by a deployment bundle. Embedded
    /// bundles also run their first invocation, whose outcome is returned.
    pub fn instantiate_cross_contract(
        &mut self,
        bundle: &CrossTxBundle,
        now: u64,
    ) -> Result<(Hash256, Option<ValidationOutcome>), SclError> {
        let tx = &bundle.tx;
        let tx_id = tx.id();
        match &tx.payload {
            TxPayload::Deploy { code, init_params } => {
                let inst = vm::deploy(code, init_params, &tx_id, now).map_err(vm_code_error)?;
                let cid = inst.contract_id;
                if self.instances.contains_key(&cid) {
                    return Err(SclError::DuplicateInstance(cid));
                }
                self.instances.insert(cid, inst);
                Ok((cid, None))
            }
            TxPayload::EmbeddedDeployInvoke { code, init_params, method, params } => {
                let mut inst = vm::deploy(code, init_params, &tx_id, now).map_err(vm_code_error)?;
                let cid = inst.contract_id;
                if self.instances.contains_key(&cid) {
                    return Err(SclError::DuplicateInstance(cid));
                }
                let outcome = match vm::invoke(&mut inst, method, params, vm::seed_for(&tx_id), now) {
                    Ok(res) => {
                        let o = self.compare(tx_id, res.result_bytes.clone(), tx.claimed_result.as_ref(), now);
                        self.results.insert(tx_id, res);
                        o
                    }
                    Err(e) => self.inconclusive(tx_id, tx.claimed_result.as_ref(), e.to_string(), now),
                };
                self.instances.insert(cid, inst);
                Ok((cid, Some(outcome)))
            }
            _ => Err(SclError::NotADeployment),
        }
    }

    /// Applies one producer transaction in the sandbox. Returns an outcome
    /// for result-bearing kinds.
    pub fn validate_bundle(&mut self, bundle: &CrossTxBundle, now: u64) -> Result<Option<ValidationOutcome>, SclError> {
        let tx = &bundle.tx;
        match &tx.payload {
            TxPayload::Deploy { .. } | TxPayload::EmbeddedDeployInvoke { .. } => {
                Ok(self.instantiate_cross_contract(bundle, now)?.1)
            }
            TxPayload::Invoke { contract_id, method, params } => {
                let tx_id = tx.id();
                let inst = self
                    .instances
                    .get_mut(contract_id)
                    .ok_or(SclError::MissingInstance(*contract_id))?;
                let outcome = match vm::invoke(inst, method, params, vm::seed_for(&tx_id), now) {
                    Ok(res) => {
                        let bytes = res.result_bytes.clone();
                        self.results.insert(tx_id, res);
                        self.compare(tx_id, bytes, tx.claimed_result.as_ref(), now)
                    }
                    Err(e) => self.inconclusive(tx_id, tx.claimed_result.as_ref(), e.to_string(), now),
                };
                Ok(Some(outcome))
            }
            TxPayload::Terminate { contract_id } => {
                let inst = self
                    .instances
                    .get_mut(contract_id)
                    .ok_or(SclError::MissingInstance(*contract_id))?;
                // already terminated (disposable) is fine
                let _ = vm::terminate(inst, now);
                Ok(None)
            }
            TxPayload::Transfer { .. } => Ok(None),
        }
    }

    /// Replays bundles in the given (producer) order at time `now`.
    pub fn replay_invocations(&mut self, bundles: &[CrossTxBundle], now: u64) -> Result<Vec<ValidationOutcome>, SclError> {
        let mut out = Vec::new();
        for b in bundles {
            if let Some(o) = self.validate_bundle(b, now)? {
                out.push(o);
            }
        }
        Ok(out)
    }
}

fn vm_code_error(e: VmError) -> SclError {
    match e {
        VmError::InvalidCode(s) => SclError::InvalidCode(s),
        other => SclError::InvalidCode(other.to_string()),
    }
}

/// The node that holds producer data for a validation group.
#[derive(Debug, Clone)]
pub struct StorageNode {
    pub id: NodeId,
    pub online: bool,
    store: HeaderImportStore,
    bundles: Vec<CrossTxBundle>,
    by_tx: HashMap<Hash256, usize>,
}

impl StorageNode {
    /// Builds a storage node from imported headers and bundles; bundles are
    /// verified and kept in producer order.
    pub fn new(id: NodeId, store: HeaderImportStore, bundles: &[CrossTxBundle]) -> Result<Self, SclError> {
        let ordered: Vec<CrossTxBundle> = verify_cross_bundles(&store, bundles)?.into_iter().cloned().collect();
        let by_tx = ordered.iter().enumerate().map(|(i, b)| (b.tx.id(), i)).collect();
        Ok(StorageNode { id, online: true, store, bundles: ordered, by_tx })
    }

    pub fn bundles(&self) -> &[CrossTxBundle] {
        &self.bundles
    }

    pub fn store(&self) -> &HeaderImportStore {
        &self.store
    }

    /// Bundle plus the header it proves against.
    pub fn fetch(&self, tx_id: &Hash256) -> Result<Option<(&CrossTxBundle, &BlockHeader)>, SclError> {
        if !self.online {
            return Err(SclError::StorageNodeUnavailable(self.id));
        }
        Ok(self.by_tx.get(tx_id).map(|&i| {
            let b = &self.bundles[i];
            (b, self.store.header_by_hash(&b.block_hash).expect("verified on insert"))
        }))
    }

    /// Producer data held: header encodings plus bundle encodings.
    pub fn stored_bytes(&self) -> u64 {
        self.store.stored_bytes() + self.bundles.iter().map(|b| b.encode().len() as u64).sum::<u64>()
    }

    /// Transaction ids of the held bundles, in producer order.
    pub fn workload(&self) -> Vec<Hash256> {
        self.bundles.iter().map(|b| b.tx.id()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveReport {
    pub outcomes: BTreeMap<NodeId, Vec<ValidationOutcome>>,
    /// Producer-data bytes held by each node.
    pub producer_bytes: BTreeMap<NodeId, u64>,
}

impl CollectiveReport {
    pub fn all_match(&self) -> bool {
        self.outcomes.values().flatten().all(|o| o.verdict == Verdict::Match)
    }

    pub fn total_bytes(&self) -> u64 {
        self.producer_bytes.values().sum()
    }
}

fn validate_via_storage(
    storage: &StorageNode,
    node: NodeId,
    source: DataSource,
    workload: &[Hash256],
    now: u64,
) -> Vec<ValidationOutcome> {
    let mut env = IsolatedEnv::new(format!("node-{node}"), source);
    let mut out = Vec::new();
    for tx_id in workload {
        let fetched = match storage.fetch(tx_id) {
            Ok(Some(f)) => f,
            Ok(None) => {
                out.push(env.inconclusive(*tx_id, None, "unknown transaction".into(), now));
                continue;
            }
            Err(e) => {
                out.push(env.inconclusive(*tx_id, None, e.to_string(), now));
                continue;
            }
        };
        let (bundle, header) = fetched;
        if !bundle.verifies_against(header) {
            out.push(env.inconclusive(*tx_id, bundle.tx.claimed_result.as_ref(), "bad proof".into(), now));
            continue;
        }
        match env.validate_bundle(bundle, now) {
            Ok(Some(o)) => out.push(o),
            Ok(None) => {}
            Err(e) => out.push(env.inconclusive(*tx_id, bundle.tx.claimed_result.as_ref(), e.to_string(), now)),
        }
    }
    out
}

/// Storage node plus requesters validating the same workload. Requesters
/// query the storage node for each transaction and hold no producer data.
/// When the storage node is offline every outcome is inconclusive.
pub fn collective_validate(
    storage: &StorageNode,
    requesters: &[NodeId],
    workload: &[Hash256],
    now: u64,
) -> CollectiveReport {
    let mut nodes: Vec<(NodeId, DataSource)> = vec![(storage.id, DataSource::Local)];
    nodes.extend(requesters.iter().map(|&r| (r, DataSource::SharedStore(storage.id))));

    #[cfg(feature = "parallel")]
    let results: Vec<(NodeId, Vec<ValidationOutcome>)> = {
        use rayon::prelude::*;
        nodes
            .par_iter()
            .map(|&(id, src)| (id, validate_via_storage(storage, id, src, workload, now)))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(NodeId, Vec<ValidationOutcome>)> = nodes
        .iter()
        .map(|&(id, src)| (id, validate_via_storage(storage, id, src, workload, now)))
        .collect();

    let mut producer_bytes = BTreeMap::new();
    producer_bytes.insert(storage.id, storage.stored_bytes());
    for &r in requesters {
        producer_bytes.insert(r, 0);
    }
    CollectiveReport { outcomes: results.into_iter().collect(), producer_bytes }
}

/// Baseline without sharing: every node keeps its own copy of the producer
/// data and validates locally.
pub fn individual_validate(storage: &StorageNode, nodes: &[NodeId], now: u64) -> CollectiveReport {
    let workload = storage.workload();
    let mut outcomes = BTreeMap::new();
    let mut producer_bytes = BTreeMap::new();
    for &n in nodes {
        let mut own = storage.clone();
        own.id = n;
        own.online = true;
        outcomes.insert(n, validate_via_storage(&own, n, DataSource::Local, &workload, now));
        producer_bytes.insert(n, own.stored_bytes());
    }
    CollectiveReport { outcomes, producer_bytes }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub node_count: u64,
    pub r_individual: u64,
    pub r_shared: u64,
    pub savings: u128,
}

/// `S = N · (R_individual − R_shared)`, exact.
pub fn resource_savings(node_count: u64, r_individual: u64, r_shared: u64) -> Result<SavingsReport, SclError> {
    if r_shared > r_individual {
        return Err(SclError::NegativeSavingsInput { individual: r_individual, shared: r_shared });
    }
    Ok(SavingsReport {
        node_count,
        r_individual,
        r_shared,
        savings: node_count as u128 * (r_individual - r_shared) as u128,
    })
}

/// CSV with columns `tx_id,verdict,computed_hash,claimed_hash,env_id,ms`.
/// Hashes are SHA-256 of the raw bytes; `claimed_hash` is empty when the
/// producer recorded nothing.
pub fn write_validation_csv<W: Write>(outcomes: &[ValidationOutcome], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tx_id", "verdict", "computed_hash", "claimed_hash", "env_id", "ms"])?;
    for o in outcomes {
        let claimed = if o.claimed.is_empty() && o.verdict != Verdict::Match {
            String::new()
        } else {
            Hash256::digest(&o.claimed).to_hex()
        };
        w.write_record([
            o.tx_id.to_hex(),
            o.verdict.label(),
            Hash256::digest(&o.computed).to_hex(),
            claimed,
            o.env_id.clone(),
            o.at_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// True for kinds whose outcome is compared.
pub fn is_result_bearing(kind: TxKind) -> bool {
    kind.carries_result()
}
