//! Scenario files and the end-to-end harness.
//!
//! A scenario is a flat `key = value` file with `[section]` headers; `#`
//! starts a comment. Top-level keys come before the first section.
//!
//! ```text
//! seed = 42
//!
//! [producer]
//! node_count = 4
//! difficulty_bits = 4
//! node_mining_time_ms = 40000
//!
//! [consumer]
//! node_count = 3
//! difficulty_bits = 2
//! confirm_depth = 2
//!
//! [segment]
//! p_fake_avg = 0.3
//! delta = 0.01
//! beta_ms = 300000
//!
//! [contract.sum]
//! code = random_sum
//! upper = 500
//! invoke_every_ms = 3000
//! invoke_count = 5
//!
//! [tamper]
//! tx_index = 2
//! bit = 0
//! ```
//!
//! [`run`] mines the producer chain with seeded exponential block times,
//! runs the contracts and records their results, syncs headers and proven
//! contract transactions to the consumer, validates them in an isolated
//! environment, and confirms segments into consumer blocks.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{seal_block, Block, ChainId, ChainView, Transaction, TxPayload};
use crate::confirmation::{
    assemble_segment, confirmation_log, mine_confirmation, plan_segment_length, Assembly, ConfirmError,
    ConfirmationState, LogEntry, MineParams, SegmentConfig,
};
use crate::rng::{derive_seed, SplitMix64};
use crate::scl::{collective_validate, DataSource, IsolatedEnv, StorageNode, ValidationOutcome, Verdict};
use crate::simlab::sample_block_time;
use crate::sync::{export_cross_txs, export_headers, CrossTxBundle, HeaderImportStore};
use crate::vm::{self, BurdenMetrics, ContractCode};
use crate::Hash256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: `{field}`: {message}")]
pub struct ConfigError {
    /// 1-based; 0 when the problem is not tied to a line.
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { line, field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContractKind {
    RandomSum,
    Accumulator,
    Constant,
}

impl fmt::Display for ContractKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContractKind::RandomSum => "random_sum",
            ContractKind::Accumulator => "accumulator",
            ContractKind::Constant => "constant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractSpec {
    pub name: String,
    pub kind: ContractKind,
    /// Loop upper bound for `random_sum`, value for `constant`.
    pub upper: i64,
    pub disposable: bool,
    pub embedded: bool,
    pub deploy_at_ms: u64,
    pub invoke_every_ms: u64,
    pub invoke_count: u64,
    /// Classic contracts only: terminate after the last call at this time.
    pub terminate_at_ms: Option<u64>,
}

impl ContractSpec {
    pub fn code(&self) -> ContractCode {
        match self.kind {
            ContractKind::RandomSum => vm::random_sum_contract(self.upper, self.disposable),
            ContractKind::Accumulator => vm::accumulator_contract(self.disposable),
            ContractKind::Constant => vm::constant_contract(self.upper, self.disposable),
        }
    }

    fn method(&self) -> &'static str {
        match self.kind {
            ContractKind::RandomSum => "run",
            ContractKind::Accumulator => "push",
            ContractKind::Constant => "get",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProducerSpec {
    pub node_count: u64,
    pub difficulty_bits: u16,
    /// Mean per-node block time; the network mines at `node_count` times
    /// that rate.
    pub node_mining_time_ms: u64,
    pub max_block_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerSpec {
    pub node_count: u64,
    pub difficulty_bits: u16,
    pub confirm_depth: u64,
    pub max_block_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub p_fake_avg: f64,
    pub delta: f64,
    pub beta_ms: u64,
    /// Fixed segment length; planned from R1–R3 when absent.
    pub length: Option<u64>,
    pub force_on_crosschain_data: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperSpec {
    /// Position among result-bearing producer transactions, in producer order.
    pub tx_index: usize,
    /// Bit of the claimed result to flip; counted from the first byte's LSB.
    pub bit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub producer: ProducerSpec,
    pub consumer: ConsumerSpec,
    pub segment: SegmentSpec,
    pub contracts: Vec<ContractSpec>,
    pub tamper: Option<TamperSpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 0,
            producer: ProducerSpec { node_count: 4, difficulty_bits: 4, node_mining_time_ms: 40_000, max_block_size: 1 << 20 },
            consumer: ConsumerSpec { node_count: 3, difficulty_bits: 2, confirm_depth: 2, max_block_size: 1 << 20 },
            segment: SegmentSpec { p_fake_avg: 0.3, delta: 0.01, beta_ms: 300_000, length: None, force_on_crosschain_data: true },
            contracts: Vec::new(),
            tamper: None,
        }
    }
}

struct Field<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn parse_num<T: std::str::FromStr>(f: &Field<'_>) -> Result<T, ConfigError> {
    f.value
        .parse()
        .map_err(|_| ConfigError::new(f.line, f.key, format!("cannot parse `{}`", f.value)))
}

fn parse_bool(f: &Field<'_>) -> Result<bool, ConfigError> {
    match f.value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::new(f.line, f.key, format!("expected true or false, got `{}`", f.value))),
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
        // section name -> (header line, fields)
        let mut sections: Vec<(String, usize, Vec<Field<'_>>)> = vec![(String::new(), 0, Vec::new())];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::new(line, content, "unterminated section header"))?
                    .trim();
                if sections.iter().any(|(n, _, _)| n == name) {
                    return Err(ConfigError::new(line, name, "duplicate section"));
                }
                sections.push((name.to_string(), line, Vec::new()));
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::new(line, content, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let fields = &mut sections.last_mut().expect("root section").2;
            if fields.iter().any(|f| f.key == key) {
                return Err(ConfigError::new(line, key, "duplicate key"));
            }
            fields.push(Field { line, key, value });
        }

        let mut sc = Scenario::default();
        for (name, header_line, fields) in &sections {
            match name.as_str() {
                "" => {
                    for f in fields {
                        match f.key {
                            "seed" => sc.seed = parse_num(f)?,
                            _ => return Err(ConfigError::new(f.line, f.key, "unknown top-level key")),
                        }
                    }
                }
                "producer" => {
                    for f in fields {
                        match f.key {
                            "node_count" => sc.producer.node_count = parse_num(f)?,
                            "difficulty_bits" => sc.producer.difficulty_bits = parse_num(f)?,
                            "node_mining_time_ms" => sc.producer.node_mining_time_ms = parse_num(f)?,
                            "max_block_size" => sc.producer.max_block_size = parse_num(f)?,
                            _ => return Err(ConfigError::new(f.line, f.key, "unknown key in [producer]")),
                        }
                    }
                }
                "consumer" => {
                    for f in fields {
                        match f.key {
                            "node_count" => sc.consumer.node_count = parse_num(f)?,
                            "difficulty_bits" => sc.consumer.difficulty_bits = parse_num(f)?,
                            "confirm_depth" => sc.consumer.confirm_depth = parse_num(f)?,
                            "max_block_size" => sc.consumer.max_block_size = parse_num(f)?,
                            _ => return Err(ConfigError::new(f.line, f.key, "unknown key in [consumer]")),
                        }
                    }
                }
                "segment" => {
                    for f in fields {
                        match f.key {
                            "p_fake_avg" => sc.segment.p_fake_avg = parse_num(f)?,
                            "delta" => sc.segment.delta = parse_num(f)?,
                            "beta_ms" => sc.segment.beta_ms = parse_num(f)?,
                            "length" => sc.segment.length = Some(parse_num(f)?),
                            "force_on_crosschain_data" => sc.segment.force_on_crosschain_data = parse_bool(f)?,
                            _ => return Err(ConfigError::new(f.line, f.key, "unknown key in [segment]")),
                        }
                    }
                }
                "tamper" => {
                    let mut t = TamperSpec { tx_index: 0, bit: 0 };
                    for f in fields {
                        match f.key {
                            "tx_index" => t.tx_index = parse_num(f)?,
                            "bit" => t.bit = parse_num(f)?,
                            _ => return Err(ConfigError::new(f.line, f.key, "unknown key in [tamper]")),
                        }
                    }
                    sc.tamper = Some(t);
                }
                other => {
                    let Some(cname) = other.strip_prefix("contract.").filter(|n| !n.is_empty()) else {
                        return Err(ConfigError::new(*header_line, other, "unknown section"));
                    };
                    sc.contracts.push(parse_contract(cname, *header_line, fields)?);
                }
            }
        }
        sc.validate(&sections.iter().map(|(n, l, _)| (n.clone(), *l)).collect())?;
        Ok(sc)
    }

    fn validate(&self, lines: &HashMap<String, usize>) -> Result<(), ConfigError> {
        let at = |s: &str| lines.get(s).copied().unwrap_or(0);
        if self.producer.node_count == 0 {
            return Err(ConfigError::new(at("producer"), "node_count", "must be at least 1"));
        }
        if self.producer.node_mining_time_ms == 0 {
            return Err(ConfigError::new(at("producer"), "node_mining_time_ms", "must be positive"));
        }
        if self.producer.difficulty_bits > 24 || self.consumer.difficulty_bits > 24 {
            return Err(ConfigError::new(0, "difficulty_bits", "at most 24 for simulation"));
        }
        if self.consumer.node_count == 0 {
            return Err(ConfigError::new(at("consumer"), "node_count", "must be at least 1"));
        }
        if self.contracts.is_empty() {
            return Err(ConfigError::new(0, "contract", "at least one [contract.NAME] section required"));
        }
        if self.segment.length == Some(0) {
            return Err(ConfigError::new(at("segment"), "length", "must be at least 1"));
        }
        self.segment_config()
            .validate()
            .map_err(|e| ConfigError::new(at("segment"), "segment", e.to_string()))?;
        Ok(())
    }

    pub fn segment_config(&self) -> SegmentConfig {
        SegmentConfig {
            header_size: crate::chain::HEADER_SIZE as u64,
            max_block_size: self.consumer.max_block_size as u64,
            p_fake_avg: self.segment.p_fake_avg,
            delta: self.segment.delta,
            beta_ms: self.segment.beta_ms,
            avg_block_time_ms: (self.producer.node_mining_time_ms / self.producer.node_count).max(1),
            confirm_depth: self.consumer.confirm_depth,
        }
    }

    /// Number of result-bearing transactions the schedule produces.
    pub fn result_bearing_count(&self) -> usize {
        self.contracts.iter().map(|c| c.invoke_count as usize).sum()
    }
}

fn parse_contract(name: &str, header_line: usize, fields: &[Field<'_>]) -> Result<ContractSpec, ConfigError> {
    let mut c = ContractSpec {
        name: name.to_string(),
        kind: ContractKind::Accumulator,
        upper: 1000,
        disposable: false,
        embedded: false,
        deploy_at_ms: 0,
        invoke_every_ms: 3000,
        invoke_count: 1,
        terminate_at_ms: None,
    };
    let mut kind_seen = false;
    for f in fields {
        match f.key {
            "code" => {
                kind_seen = true;
                c.kind = match f.value {
                    "random_sum" => ContractKind::RandomSum,
                    "accumulator" => ContractKind::Accumulator,
                    "constant" => ContractKind::Constant,
                    v => return Err(ConfigError::new(f.line, f.key, format!("unknown contract code `{v}`"))),
                }
            }
            "upper" => c.upper = parse_num(f)?,
            "disposable" => c.disposable = parse_bool(f)?,
            "embedded" => c.embedded = parse_bool(f)?,
            "deploy_at_ms" => c.deploy_at_ms = parse_num(f)?,
            "invoke_every_ms" => c.invoke_every_ms = parse_num(f)?,
            "invoke_count" => c.invoke_count = parse_num(f)?,
            "terminate_at_ms" => c.terminate_at_ms = Some(parse_num(f)?),
            _ => return Err(ConfigError::new(f.line, f.key, format!("unknown key in [contract.{name}]"))),
        }
    }
    if !kind_seen {
        return Err(ConfigError::new(header_line, "code", "required"));
    }
    if c.kind == ContractKind::RandomSum && !(100..=vm::MAX_LOOP_BOUND as i64).contains(&c.upper) {
        return Err(ConfigError::new(header_line, "upper", "random_sum needs 100 <= upper <= 10000000"));
    }
    if c.invoke_count == 0 && c.embedded {
        return Err(ConfigError::new(header_line, "invoke_count", "embedded contracts need at least one call"));
    }
    if c.disposable && c.invoke_count > 1 {
        return Err(ConfigError::new(header_line, "invoke_count", "disposable contracts allow one call"));
    }
    if c.invoke_count > 1 && c.invoke_every_ms == 0 {
        return Err(ConfigError::new(header_line, "invoke_every_ms", "must be positive"));
    }
    if let Some(t) = c.terminate_at_ms {
        if c.disposable || c.embedded {
            return Err(ConfigError::new(header_line, "terminate_at_ms", "only for classic, non-disposable contracts"));
        }
        if t < c.last_call_ms() {
            return Err(ConfigError::new(header_line, "terminate_at_ms", "before the last call"));
        }
    }
    Ok(c)
}

impl ContractSpec {
    /// Call times; an embedded contract's first call is its deployment.
    fn call_times(&self) -> Vec<u64> {
        let offset = if self.embedded { 0 } else { 1 };
        (0..self.invoke_count).map(|k| self.deploy_at_ms + (k + offset) * self.invoke_every_ms).collect()
    }

    fn last_call_ms(&self) -> u64 {
        self.call_times().last().copied().unwrap_or(self.deploy_at_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub blocks: u64,
    pub height: u64,
    pub transactions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub total: u64,
    pub matched: u64,
    pub mismatched: u64,
    pub inconclusive: u64,
    pub mismatched_tx_ids: Vec<Hash256>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractBurden {
    pub contract: String,
    pub contract_id: Hash256,
    pub embedded: bool,
    pub disposable: bool,
    pub time_occupation_ms: u64,
    pub transaction_numbers: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveSummary {
    pub nodes: u64,
    pub all_match: bool,
    pub producer_bytes: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub producer: ChainSummary,
    pub consumer: ChainSummary,
    pub segment_length: u64,
    pub r2_met: bool,
    pub segments_confirmed: u64,
    pub producer_heights_confirmed: u64,
    pub segments_rejected: Vec<String>,
    pub validation: ValidationSummary,
    pub burden: Vec<ContractBurden>,
    pub collective: CollectiveSummary,
    pub conflicts: u64,
    pub tampered_tx: Option<Hash256>,
    pub exit_status: i32,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub outcomes: Vec<ValidationOutcome>,
    pub log: Vec<LogEntry>,
}

pub const EXIT_CLEAN: i32 = 0;
pub const EXIT_VALIDATION_FAILURE: i32 = 2;
pub const EXIT_CONFIG_ERROR: i32 = 3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("harness failure: {0}")]
    Internal(String),
}

struct Event {
    at: u64,
    contract: usize,
    seq: u64,
    action: Action,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Action {
    Deploy,
    Call,
    Terminate,
}

fn schedule(sc: &Scenario) -> Vec<Event> {
    let mut ev = Vec::new();
    for (ci, c) in sc.contracts.iter().enumerate() {
        let mut seq = 0;
        if !c.embedded {
            ev.push(Event { at: c.deploy_at_ms, contract: ci, seq, action: Action::Deploy });
            seq += 1;
        }
        for t in c.call_times() {
            ev.push(Event { at: t, contract: ci, seq, action: Action::Call });
            seq += 1;
        }
        if let Some(t) = c.terminate_at_ms {
            ev.push(Event { at: t, contract: ci, seq, action: Action::Terminate });
        }
    }
    ev.sort_by_key(|e| (e.at, e.contract, e.seq));
    ev
}

struct Producer {
    chain: ChainView,
    instances: HashMap<Hash256, vm::ContractInstance>,
    contract_ids: Vec<Option<Hash256>>,
    nonce: u64,
    result_bearing: usize,
    tampered: Option<Hash256>,
    param_rng: SplitMix64,
}

impl Producer {
    fn build_tx(&mut self, sc: &Scenario, e: &Event, now: u64) -> Result<Transaction, RunError> {
        let spec = &sc.contracts[e.contract];
        let sender = e.contract as u64 + 1;
        let nonce = self.nonce;
        self.nonce += 1;
        let internal = |m: vm::VmError| RunError::Internal(format!("producer contract {}: {m}", spec.name));
        let params = match spec.kind {
            ContractKind::Accumulator => vec![(self.param_rng.next_u64() % 1000) as i64],
            _ => vec![],
        };
        let tx = match e.action {
            Action::Deploy => {
                let tx = Transaction::new(sender, TxPayload::Deploy { code: spec.code(), init_params: vec![] }, nonce);
                let inst = vm::deploy(&spec.code(), &[], &tx.id(), now).map_err(internal)?;
                self.contract_ids[e.contract] = Some(inst.contract_id);
                self.instances.insert(inst.contract_id, inst);
                return Ok(tx);
            }
            Action::Terminate => {
                let cid = self.contract_ids[e.contract].expect("deployed before terminate");
                vm::terminate(self.instances.get_mut(&cid).expect("instance"), now).map_err(internal)?;
                return Ok(Transaction::new(sender, TxPayload::Terminate { contract_id: cid }, nonce));
            }
            Action::Call => match self.contract_ids[e.contract] {
                None => {
                    let tx = Transaction::new(
                        sender,
                        TxPayload::EmbeddedDeployInvoke {
                            code: spec.code(),
                            init_params: vec![],
                            method: spec.method().into(),
                            params,
                        },
                        nonce,
                    );
                    let (inst, res) = vm::deploy_embedded(&tx, now).map_err(internal)?;
                    self.contract_ids[e.contract] = Some(inst.contract_id);
                    self.instances.insert(inst.contract_id, inst);
                    tx.with_claimed_result(res.result_bytes)
                }
                Some(cid) => {
                    let tx = Transaction::new(
                        sender,
                        TxPayload::Invoke { contract_id: cid, method: spec.method().into(), params: params.clone() },
                        nonce,
                    );
                    let inst = self.instances.get_mut(&cid).expect("instance");
                    let res = vm::invoke(inst, spec.method(), &params, vm::seed_for(&tx.id()), now).map_err(internal)?;
                    tx.with_claimed_result(res.result_bytes)
                }
            },
        };
        let idx = self.result_bearing;
        self.result_bearing += 1;
        match sc.tamper {
            Some(t) if t.tx_index == idx => {
                let mut tx = tx;
                let claimed = tx.claimed_result.as_mut().expect("result-bearing");
                let bit = t.bit % (claimed.len() * 8);
                claimed[bit / 8] ^= 1 << (bit % 8);
                self.tampered = Some(tx.id());
                Ok(tx)
            }
            _ => Ok(tx),
        }
    }
}

/// Runs a scenario to completion. Deterministic for a fixed scenario.
pub fn run(sc: &Scenario) -> Result<RunOutput, RunError> {
    if let Some(t) = sc.tamper {
        if t.tx_index >= sc.result_bearing_count() {
            return Err(ConfigError::new(0, "tx_index", "beyond the number of result-bearing transactions").into());
        }
    }
    let seg_cfg = sc.segment_config();
    let plan = plan_segment_length(&seg_cfg).map_err(|e| ConfigError::new(0, "segment", e.to_string()))?;
    let n = sc.segment.length.unwrap_or(plan.n);
    let r2_met = sc.segment.length.map_or(plan.r2_met, |l| seg_cfg.p_fake_avg.powi(l as i32) < seg_cfg.delta);

    let internal = |e: &dyn fmt::Display| RunError::Internal(e.to_string());
    let mut producer = Producer {
        chain: ChainView::with_genesis(ChainId::Producer, sc.producer.difficulty_bits, sc.producer.max_block_size),
        instances: HashMap::new(),
        contract_ids: vec![None; sc.contracts.len()],
        nonce: 0,
        result_bearing: 0,
        tampered: None,
        param_rng: SplitMix64::new(derive_seed(sc.seed, 1)),
    };
    let mut time_rng = SplitMix64::new(derive_seed(sc.seed, 0));
    let network_rate = sc.producer.node_count as f64 / sc.producer.node_mining_time_ms as f64;

    let pg = producer.chain.genesis().header.clone();
    let mut store = HeaderImportStore::new(pg.clone(), sc.producer.difficulty_bits);
    let mut consumer = ChainView::with_genesis(ChainId::Consumer, sc.consumer.difficulty_bits, sc.consumer.max_block_size);
    let mut state = ConfirmationState::new(pg, sc.producer.difficulty_bits);
    let mut env = IsolatedEnv::new("consumer-0", DataSource::Local);
    let mut outcomes: Vec<ValidationOutcome> = Vec::new();
    let mut pending: Vec<CrossTxBundle> = Vec::new();
    let mut all_bundles: Vec<CrossTxBundle> = Vec::new();
    let mut rejected: Vec<String> = Vec::new();
    let mut blocked = false;

    let events = schedule(sc);
    let mut next_event = 0;
    let mut now = 0u64;
    let mut tail = 0u64;
    // mine until every event is included, then `n` more blocks so the last
    // segment can fill
    while next_event < events.len() || tail < n {
        let dt = sample_block_time(network_rate, &mut time_rng).round() as u64;
        now += dt.max(1);
        let mut txs = Vec::new();
        while next_event < events.len() && events[next_event].at <= now {
            let e = &events[next_event];
            txs.push(producer.build_tx(sc, e, now)?);
            next_event += 1;
        }
        if next_event >= events.len() && txs.is_empty() {
            tail += 1;
        }
        let parent = producer.chain.tip().header.clone();
        let block = seal_block(&parent, txs, None, sc.producer.difficulty_bits, now, sc.producer.max_block_size)
            .map_err(|e| internal(&e))?;
        producer.chain.apply_block(block.clone()).map_err(|e| internal(&e))?;

        // sync
        let h = block.header.height;
        store.import_headers(&export_headers(&producer.chain, h, h).map_err(|e| internal(&e))?).map_err(|e| internal(&e))?;
        let bundles = export_cross_txs(&block, |t| t.kind().is_contract_kind());
        crate::sync::verify_cross_bundles(&store, &bundles).map_err(|e| internal(&e))?;

        // contract-level validation
        for b in &bundles {
            match env.validate_bundle(b, block.header.timestamp) {
                Ok(Some(o)) => outcomes.push(o),
                Ok(None) => {}
                Err(e) => outcomes.push(ValidationOutcome {
                    tx_id: b.tx.id(),
                    computed: Vec::new(),
                    claimed: b.tx.claimed_result.clone().unwrap_or_default(),
                    verdict: Verdict::Inconclusive(e.to_string()),
                    env_id: env.env_id().to_string(),
                    at_ms: block.header.timestamp,
                }),
            }
        }
        pending.extend(bundles.iter().cloned());
        all_bundles.extend(bundles);

        // confirmation
        if !blocked {
            if let Assembly::Ready(seg) =
                assemble_segment(&store, &state, n, &pending, sc.segment.force_on_crosschain_data)
                    .map_err(|e| internal(&e))?
            {
                let params = MineParams {
                    difficulty_bits: sc.consumer.difficulty_bits,
                    timestamp: now,
                    header_size: crate::chain::HEADER_SIZE as u64,
                };
                match mine_confirmation(&consumer, &state, seg.clone(), &outcomes, vec![], &params) {
                    Ok(cb) => {
                        consumer.apply_block(cb.clone()).map_err(|e| internal(&e))?;
                        let included: Vec<Hash256> = seg.cross_txs.iter().map(|b| b.tx.id()).collect();
                        pending.retain(|b| !included.contains(&b.tx.id()));
                        state.apply_segment(cb.hash(), cb.header.height, seg).map_err(|e| internal(&e))?;
                    }
                    Err(ConfirmError::SegmentRejected(reason)) => {
                        rejected.push(reason);
                        // later segments cannot skip a rejected one
                        blocked = true;
                    }
                    Err(e) => return Err(internal(&e)),
                }
            }
        }
    }

    // bury confirmations
    for _ in 0..sc.consumer.confirm_depth {
        now += 1;
        let parent = consumer.tip().header.clone();
        let b: Block = seal_block(&parent, vec![], None, sc.consumer.difficulty_bits, now, sc.consumer.max_block_size)
            .map_err(|e| internal(&e))?;
        consumer.apply_block(b).map_err(|e| internal(&e))?;
    }

    // collective validation across the consumer nodes
    let storage = StorageNode::new(0, store.clone(), &all_bundles).map_err(|e| internal(&e))?;
    let requesters: Vec<u32> = (1..sc.consumer.node_count as u32).collect();
    let collective = collective_validate(&storage, &requesters, &storage.workload(), now);

    // burden per contract, from the consumer's isolated instances
    let mut burden = Vec::new();
    for (ci, spec) in sc.contracts.iter().enumerate() {
        let Some(cid) = producer.contract_ids[ci] else { continue };
        let Some(inst) = env.instance(&cid) else { continue };
        let related: Vec<Transaction> = all_bundles
            .iter()
            .map(|b| &b.tx)
            .filter(|t| match &t.payload {
                TxPayload::Deploy { .. } | TxPayload::EmbeddedDeployInvoke { .. } => vm::contract_id_for(&t.id()) == cid,
                TxPayload::Invoke { contract_id, .. } | TxPayload::Terminate { contract_id } => *contract_id == cid,
                TxPayload::Transfer { .. } => false,
            })
            .cloned()
            .collect();
        let BurdenMetrics { time_occupation, transaction_numbers } =
            vm::compute_burden(inst, &related, Some(now)).map_err(|e| internal(&e))?;
        burden.push(ContractBurden {
            contract: spec.name.clone(),
            contract_id: cid,
            embedded: spec.embedded,
            disposable: spec.disposable,
            time_occupation_ms: time_occupation,
            transaction_numbers,
        });
    }

    let mut validation = ValidationSummary { total: outcomes.len() as u64, matched: 0, mismatched: 0, inconclusive: 0, mismatched_tx_ids: vec![] };
    for o in &outcomes {
        match o.verdict {
            Verdict::Match => validation.matched += 1,
            Verdict::Mismatch => {
                validation.mismatched += 1;
                validation.mismatched_tx_ids.push(o.tx_id);
            }
            Verdict::Inconclusive(_) => validation.inconclusive += 1,
        }
    }
    let clean = validation.mismatched == 0 && validation.inconclusive == 0 && rejected.is_empty();
    let tx_count = |v: &ChainView| v.canonical_blocks().map(|b| b.internal_txs.len() as u64).sum();
    let log = confirmation_log(&consumer, &state);
    let report = RunReport {
        seed: sc.seed,
        producer: ChainSummary { blocks: producer.chain.height(), height: producer.chain.height(), transactions: tx_count(&producer.chain) },
        consumer: ChainSummary { blocks: consumer.height(), height: consumer.height(), transactions: tx_count(&consumer) },
        segment_length: n,
        r2_met,
        segments_confirmed: state.segments().len() as u64,
        producer_heights_confirmed: state.tip().0,
        segments_rejected: rejected,
        validation,
        burden,
        collective: CollectiveSummary {
            nodes: sc.consumer.node_count,
            all_match: collective.all_match(),
            producer_bytes: collective.producer_bytes,
        },
        conflicts: 0,
        tampered_tx: producer.tampered,
        exit_status: if clean { EXIT_CLEAN } else { EXIT_VALIDATION_FAILURE },
    };
    Ok(RunOutput { report, outcomes, log })
}

/// Pretty JSON with a trailing newline.
pub fn report_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// A small random scenario for property tests: 1–3 contracts of mixed
/// kinds, optionally with one tampered result.
pub fn random_scenario(seed: u64, tamper: bool) -> Scenario {
    let mut rng = SplitMix64::new(derive_seed(seed, 7));
    let mut pick = |k: u64| rng.next_u64() % k;
    let mut sc = Scenario { seed, ..Scenario::default() };
    sc.producer.difficulty_bits = 2;
    sc.consumer.difficulty_bits = 1;
    sc.segment.length = Some(1 + pick(4));
    let count = 1 + pick(3);
    for i in 0..count {
        let kind = match pick(3) {
            0 => ContractKind::RandomSum,
            1 => ContractKind::Accumulator,
            _ => ContractKind::Constant,
        };
        let disposable = pick(4) == 0;
        let embedded = pick(3) == 0;
        sc.contracts.push(ContractSpec {
            name: format!("c{i}"),
            kind,
            upper: if kind == ContractKind::RandomSum { 100 + pick(400) as i64 } else { pick(1000) as i64 },
            disposable,
            embedded,
            deploy_at_ms: pick(20_000),
            invoke_every_ms: 1000 + pick(5000),
            invoke_count: if disposable { 1 } else { 1 + pick(4) },
            terminate_at_ms: None,
        });
    }
    if tamper {
        let total = sc.result_bearing_count() as u64;
        sc.tamper = Some(TamperSpec { tx_index: pick(total) as usize, bit: pick(64) as usize });
    }
    sc
}
