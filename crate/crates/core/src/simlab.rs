//! Monte-Carlo mining races and the storage-sharing scenario.
//!
//! Block times are exponential. The producer network of `n` nodes finds
//! its next block at the minimum of `n` per-node times; an adversary node
//! mines alone. A *cheat* succeeds when the adversary mines one block
//! before the producers mine `L`; a *rebranch* succeeds when the adversary
//! mines `L` blocks first.
//!
//! Trial `i` draws from the stream `derive_seed(master_seed, i)` only, so
//! results do not depend on evaluation order and the same trial sees the
//! same uniforms in every grid cell. With the default
//! [`Sampling::NetworkMinimum`] each producer block time is one inverse-CDF
//! draw at rate `n / avg`, which makes every trial outcome monotone in
//! `n` and `L` for a fixed stream.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::chain::{seal_block, BlockHeader, ChainId, Transaction, TxPayload, HEADER_SIZE};
use crate::rng::SplitMix64;
use crate::scl::resource_savings;
use crate::sync::export_cross_txs;
use crate::vm::{self, accumulator_contract};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RaceModel {
    Cheat,
    Rebranch,
}

impl RaceModel {
    pub fn name(self) -> &'static str {
        match self {
            RaceModel::Cheat => "cheat",
            RaceModel::Rebranch => "rebranch",
        }
    }
}

impl std::str::FromStr for RaceModel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cheat" => Ok(RaceModel::Cheat),
            "rebranch" => Ok(RaceModel::Rebranch),
            other => Err(format!("unknown model `{other}`")),
        }
    }
}

/// How a producer block time is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Sampling {
    /// One draw at rate `n / avg`: the law of the minimum of `n` draws.
    #[default]
    NetworkMinimum,
    /// `n` per-node draws at rate `1 / avg`, then the minimum.
    PerNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceConfig {
    pub producer_nodes: u64,
    pub segment_length: u64,
    /// Seconds.
    pub avg_mining_time: f64,
    pub trials: u64,
    pub master_seed: u64,
    pub sampling: Sampling,
}

impl Default for RaceConfig {
    fn default() -> Self {
        RaceConfig {
            producer_nodes: 2,
            segment_length: 2,
            avg_mining_time: 10.0,
            trials: 100_000,
            master_seed: 0,
            sampling: Sampling::NetworkMinimum,
        }
    }
}

impl RaceConfig {
    fn check(&self) {
        assert!(self.producer_nodes >= 1, "producer_nodes must be >= 1");
        assert!(self.segment_length >= 1, "segment_length must be >= 1");
        assert!(self.avg_mining_time > 0.0, "avg_mining_time must be positive");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceResult {
    pub n: u64,
    pub l: u64,
    pub model: RaceModel,
    pub estimate: f64,
    /// `sqrt(p̂ (1 − p̂) / T)`.
    pub stderr: f64,
    pub trials: u64,
    pub seed: u64,
    pub successes: u64,
}

impl RaceResult {
    /// Distance from `p0` in units of the standard error implied by `p0`.
    /// Unlike the plug-in `stderr`, this stays meaningful when `p̂ = 0`.
    pub fn sigmas_from(&self, p0: f64) -> f64 {
        let se = (p0 * (1.0 - p0) / self.trials as f64).sqrt();
        let d = (self.estimate - p0).abs();
        if se == 0.0 {
            if d == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            d / se
        }
    }
}

/// Inverse-CDF exponential variate, `−ln(u) / rate` with `u` in (0, 1].
#[inline]
pub fn sample_block_time(rate: f64, rng: &mut SplitMix64) -> f64 {
    exp_from_unit(rng.next_open_unit(), rate)
}

#[inline]
pub fn exp_from_unit(u: f64, rate: f64) -> f64 {
    -u.ln() / rate
}

#[inline]
fn producer_block_time(cfg: &RaceConfig, rng: &mut SplitMix64) -> f64 {
    let rate = 1.0 / cfg.avg_mining_time;
    match cfg.sampling {
        Sampling::NetworkMinimum => sample_block_time(cfg.producer_nodes as f64 * rate, rng),
        Sampling::PerNode => (0..cfg.producer_nodes).map(|_| sample_block_time(rate, rng)).fold(f64::INFINITY, f64::min),
    }
}

/// Adversary draw first, then `L` producer block times.
pub fn cheat_trial(cfg: &RaceConfig, rng: &mut SplitMix64) -> bool {
    let adversary = sample_block_time(1.0 / cfg.avg_mining_time, rng);
    let mut segment = 0.0;
    for _ in 0..cfg.segment_length {
        segment += producer_block_time(cfg, rng);
        if segment > adversary {
            // remaining draws cannot change the outcome
            return true;
        }
    }
    adversary < segment
}

/// Per block: adversary draw, then producer draw.
pub fn rebranch_trial(cfg: &RaceConfig, rng: &mut SplitMix64) -> bool {
    let rate = 1.0 / cfg.avg_mining_time;
    let (mut adversary, mut producers) = (0.0, 0.0);
    for _ in 0..cfg.segment_length {
        adversary += sample_block_time(rate, rng);
        producers += producer_block_time(cfg, rng);
    }
    adversary < producers
}

/// `1 − (n / (n + 1))^L`.
pub fn closed_form_cheat(n: u64, l: u64) -> f64 {
    assert!(n >= 1 && l >= 1);
    let q = n as f64 / (n as f64 + 1.0);
    -(l as f64 * q.ln()).exp_m1()
}

/// `Σ_{k<L} C(L−1+k, k) p^L q^k` with `p = 1/(n+1)`, `q = n/(n+1)`.
pub fn closed_form_rebranch(n: u64, l: u64) -> f64 {
    assert!(n >= 1 && l >= 1);
    let p = 1.0 / (n as f64 + 1.0);
    let q = n as f64 / (n as f64 + 1.0);
    let mut term = p.powi(l as i32);
    let mut sum = term;
    for k in 1..l {
        term *= q * (l - 1 + k) as f64 / k as f64;
        sum += term;
    }
    sum
}

pub fn closed_form(model: RaceModel, n: u64, l: u64) -> f64 {
    match model {
        RaceModel::Cheat => closed_form_cheat(n, l),
        RaceModel::Rebranch => closed_form_rebranch(n, l),
    }
}

fn trial(model: RaceModel, cfg: &RaceConfig, i: u64) -> bool {
    let mut rng = SplitMix64::for_stream(cfg.master_seed, i);
    match model {
        RaceModel::Cheat => cheat_trial(cfg, &mut rng),
        RaceModel::Rebranch => rebranch_trial(cfg, &mut rng),
    }
}

#[cfg(feature = "parallel")]
fn count_successes(model: RaceModel, cfg: &RaceConfig) -> u64 {
    use rayon::prelude::*;
    (0..cfg.trials).into_par_iter().filter(|&i| trial(model, cfg, i)).count() as u64
}

#[cfg(not(feature = "parallel"))]
fn count_successes(model: RaceModel, cfg: &RaceConfig) -> u64 {
    count_successes_sequential(model, cfg)
}

pub fn count_successes_sequential(model: RaceModel, cfg: &RaceConfig) -> u64 {
    (0..cfg.trials).filter(|&i| trial(model, cfg, i)).count() as u64
}

fn result_from(model: RaceModel, cfg: &RaceConfig, successes: u64) -> RaceResult {
    let t = cfg.trials as f64;
    let p = if cfg.trials == 0 { 0.0 } else { successes as f64 / t };
    RaceResult {
        n: cfg.producer_nodes,
        l: cfg.segment_length,
        model,
        estimate: p,
        stderr: if cfg.trials == 0 { 0.0 } else { (p * (1.0 - p) / t).sqrt() },
        trials: cfg.trials,
        seed: cfg.master_seed,
        successes,
    }
}

/// Monte-Carlo estimate for one cell; parallel when the `parallel`
/// feature is on.
pub fn estimate(model: RaceModel, cfg: &RaceConfig) -> RaceResult {
    cfg.check();
    result_from(model, cfg, count_successes(model, cfg))
}

/// Single-threaded estimate, identical to [`estimate`] bit for bit.
pub fn estimate_sequential(model: RaceModel, cfg: &RaceConfig) -> RaceResult {
    cfg.check();
    result_from(model, cfg, count_successes_sequential(model, cfg))
}

/// One result per `(n, L)` cell, `n`-major. `base` supplies trials, seed,
/// mean time and sampling.
pub fn run_grid(model: RaceModel, n_values: &[u64], l_values: &[u64], base: &RaceConfig) -> Vec<RaceResult> {
    assert!(!n_values.is_empty() && !l_values.is_empty(), "grid must be non-empty");
    let mut out = Vec::with_capacity(n_values.len() * l_values.len());
    for &n in n_values {
        for &l in l_values {
            let cfg = RaceConfig { producer_nodes: n, segment_length: l, ..*base };
            out.push(estimate(model, &cfg));
        }
    }
    out
}

/// Node counts and segment lengths of the default race grid.
pub const GRID_NODES: [u64; 6] = [2, 8, 32, 128, 512, 2048];
pub const GRID_LENGTHS: [u64; 7] = [2, 3, 4, 5, 6, 7, 8];

/// CSV with columns `n,L,model,estimate,stderr,trials,seed`. Floats use
/// the shortest round-trip representation.
pub fn write_grid_csv<W: Write>(results: &[RaceResult], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "L", "model", "estimate", "stderr", "trials", "seed"])?;
    for r in results {
        w.write_record([
            r.n.to_string(),
            r.l.to_string(),
            r.model.name().to_string(),
            r.estimate.to_string(),
            r.stderr.to_string(),
            r.trials.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageConfig {
    /// Simulated ms between producer contract calls.
    pub tx_interval_ms: u64,
    pub sample_interval_ms: u64,
    pub duration_ms: u64,
    /// Requester nodes sharing one storage node.
    pub sharers: u64,
    pub seed: u64,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig { tx_interval_ms: 1000, sample_interval_ms: 10_000, duration_ms: 300_000, sharers: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    Shared,
    NonShared,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::Shared => "shared",
            Topology::NonShared => "non_shared",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageSample {
    pub t_ms: u64,
    pub topology: Topology,
    /// Node 0 is the storage node; 1..=sharers are requesters.
    pub node: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub config: StorageConfig,
    pub samples: Vec<StorageSample>,
    pub shared_total: u64,
    pub non_shared_total: u64,
    /// `1 − shared_total / non_shared_total` at the final sample.
    pub savings_ratio: f64,
    /// `N · (R_ind − R_shared)` over the requesters.
    pub savings: u128,
    /// The savings formula agrees with the byte counters.
    pub savings_consistent: bool,
}

/// Producer-data bytes over time when every node keeps its own copy versus
/// when `sharers` requesters rely on one storage node. The producer calls
/// an accumulator contract every `tx_interval_ms`, one block per call;
/// consumers hold headers plus proven contract transactions.
pub fn run_storage_scenario(cfg: &StorageConfig) -> StorageReport {
    assert!(cfg.sharers >= 1, "at least one sharer");
    assert!(cfg.tx_interval_ms > 0 && cfg.sample_interval_ms > 0);
    let mut rng = SplitMix64::new(cfg.seed);
    let deploy = Transaction::new(0, TxPayload::Deploy { code: accumulator_contract(false), init_params: vec![] }, 0);
    let cid = vm::contract_id_for(&deploy.id());
    let mut inst = vm::deploy(&accumulator_contract(false), &[], &deploy.id(), 0).expect("valid contract");

    // (time, bytes added) per producer block
    let mut growth: Vec<(u64, u64)> = Vec::new();
    let mut parent = BlockHeader::genesis(ChainId::Producer);
    let mut pending = vec![deploy];
    let mut t = 0;
    let mut nonce = 1;
    while t <= cfg.duration_ms {
        let param = (rng.next_u64() % 1000) as i64;
        let mut tx = Transaction::new(1, TxPayload::Invoke { contract_id: cid, method: "push".into(), params: vec![param] }, nonce);
        nonce += 1;
        let res = vm::invoke(&mut inst, "push", &[param], vm::seed_for(&tx.id()), t).expect("accumulator runs");
        tx = tx.with_claimed_result(res.result_bytes);
        pending.push(tx);
        let block = seal_block(&parent, std::mem::take(&mut pending), None, 0, t, usize::MAX).expect("unbounded");
        let bytes: u64 =
            HEADER_SIZE as u64 + export_cross_txs(&block, |_| true).iter().map(|b| b.encode().len() as u64).sum::<u64>();
        growth.push((t, bytes));
        parent = block.header;
        t += cfg.tx_interval_ms;
    }

    let nodes = cfg.sharers + 1;
    let genesis_bytes = HEADER_SIZE as u64;
    let mut samples = Vec::new();
    let mut held = genesis_bytes;
    let mut gi = 0;
    let mut s = 0;
    while s <= cfg.duration_ms {
        while gi < growth.len() && growth[gi].0 <= s {
            held += growth[gi].1;
            gi += 1;
        }
        for node in 0..nodes {
            samples.push(StorageSample { t_ms: s, topology: Topology::NonShared, node, bytes: held });
        }
        for node in 0..nodes {
            let bytes = if node == 0 { held } else { 0 };
            samples.push(StorageSample { t_ms: s, topology: Topology::Shared, node, bytes });
        }
        s += cfg.sample_interval_ms;
    }
    let last_t = samples.last().map(|x| x.t_ms).unwrap_or(0);
    let total = |topo: Topology| -> u64 {
        samples.iter().filter(|x| x.t_ms == last_t && x.topology == topo).map(|x| x.bytes).sum()
    };
    let shared_total = total(Topology::Shared);
    let non_shared_total = total(Topology::NonShared);
    let r_ind = samples
        .iter()
        .find(|x| x.t_ms == last_t && x.topology == Topology::NonShared && x.node == 1)
        .map(|x| x.bytes)
        .unwrap_or(0);
    let r_shared = samples
        .iter()
        .find(|x| x.t_ms == last_t && x.topology == Topology::Shared && x.node == 1)
        .map(|x| x.bytes)
        .unwrap_or(0);
    let savings = resource_savings(cfg.sharers, r_ind, r_shared).expect("shared never exceeds individual").savings;
    StorageReport {
        config: *cfg,
        samples,
        shared_total,
        non_shared_total,
        savings_ratio: if non_shared_total == 0 { 0.0 } else { 1.0 - shared_total as f64 / non_shared_total as f64 },
        savings,
        savings_consistent: savings == (non_shared_total - shared_total) as u128,
    }
}

/// CSV with columns `t_ms,topology,node,bytes`.
pub fn write_storage_csv<W: Write>(report: &StorageReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t_ms", "topology", "node", "bytes"])?;
    for s in &report.samples {
        w.write_record([s.t_ms.to_string(), s.topology.name().to_string(), s.node.to_string(), s.bytes.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
