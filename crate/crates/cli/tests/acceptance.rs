//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Every criterion is evaluated even when
//! an earlier one fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};
use xchainlab::chain::{seal_block, ChainId, ChainView, Transaction, TxPayload};
use xchainlab::confirmation::{plan_segment_length, SegmentConfig};
use xchainlab::scenario::{random_scenario, run};
use xchainlab::scl::{collective_validate, individual_validate, resource_savings, StorageNode, Verdict};
use xchainlab::simlab::{
    closed_form, estimate, estimate_sequential, run_grid, run_storage_scenario, RaceConfig, RaceModel, RaceResult,
    StorageConfig, GRID_LENGTHS, GRID_NODES,
};
use xchainlab::sync::{export_cross_txs, export_headers, HeaderImportStore, SyncError};
use xchainlab::vm::{self, compute_burden};

// Pinned tolerances.
const TAMPER_RUNS: u64 = 200;
const TAMPER_BUDGET: Duration = Duration::from_secs(60);
const GAP_MAX_LEN: u64 = 32;
const MC_TRIALS: u64 = 100_000;
const MC_SIGMAS: f64 = 4.0;
const MC_MIN_CELLS: usize = 83;
const MC_BUDGET: Duration = Duration::from_secs(600);
const N2048_CEILING: f64 = 0.002;
const MASTER_SEED: u64 = 20240601;

struct Verdicts {
    failed: usize,
}

impl Verdicts {
    fn record(&mut self, id: &str, title: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("criterion {id:<3} {title:<44} {}  {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn c1_tamper_detection(v: &mut Verdicts) {
    let start = Instant::now();
    let mut exact = 0;
    let mut honest_clean = 0;
    for seed in 0..TAMPER_RUNS {
        let honest = run(&random_scenario(seed, false)).expect("honest run").report;
        if honest.validation.mismatched == 0 && honest.exit_status == 0 {
            honest_clean += 1;
        }
        let t = run(&random_scenario(seed, true)).expect("tampered run").report;
        if t.tampered_tx.is_some() && t.validation.mismatched_tx_ids == vec![t.tampered_tx.unwrap()] && t.exit_status != 0 {
            exact += 1;
        }
    }
    let elapsed = start.elapsed();
    v.record(
        "1",
        "tamper detection",
        exact == TAMPER_RUNS && honest_clean == TAMPER_RUNS && elapsed < TAMPER_BUDGET,
        format!("{exact}/{TAMPER_RUNS} exact, {honest_clean}/{TAMPER_RUNS} honest clean, {:.1}s", elapsed.as_secs_f64()),
    );
}

fn c2_gap_rejection(v: &mut Verdicts) {
    let mut chain = ChainView::with_genesis(ChainId::Producer, 1, 1 << 20);
    for i in 0..GAP_MAX_LEN {
        let tip = chain.tip().header.clone();
        chain.apply_block(seal_block(&tip, vec![], None, 1, i, 1 << 20).unwrap()).unwrap();
    }
    let genesis = chain.genesis().header.clone();
    let (mut cases, mut rejected, mut full_ok) = (0, 0, 0);
    for len in 1..=GAP_MAX_LEN {
        let batch = export_headers(&chain, 1, len).unwrap();
        let mut fresh = HeaderImportStore::new(genesis.clone(), 1);
        if fresh.import_headers(&batch).is_ok() {
            full_ok += 1;
        }
        for gap in 1..batch.len().saturating_sub(1) {
            let mut holed = batch.clone();
            holed.remove(gap);
            let mut store = HeaderImportStore::new(genesis.clone(), 1);
            cases += 1;
            let r = store.import_headers(&holed);
            if matches!(r, Err(SyncError::GapDetected { .. })) && store.last_height() == 0 {
                rejected += 1;
            }
        }
    }
    v.record(
        "2",
        "gap rejection",
        cases > 0 && rejected == cases && full_ok == GAP_MAX_LEN,
        format!("{rejected}/{cases} interior gaps rejected, {full_ok}/{GAP_MAX_LEN} complete batches accepted"),
    );
}

fn c3_segment_planner(v: &mut Verdicts) {
    let cfg = SegmentConfig {
        header_size: 80,
        max_block_size: 1 << 20,
        p_fake_avg: 0.3,
        delta: 0.01,
        beta_ms: 300_000,
        avg_block_time_ms: 10_000,
        confirm_depth: 6,
    };
    let p = plan_segment_length(&cfg).unwrap();
    let n = p.n;
    let rules = n * cfg.header_size < cfg.max_block_size
        && cfg.p_fake_avg.powi(n as i32) < cfg.delta
        && n * cfg.avg_block_time_ms < cfg.beta_ms;
    let capped = plan_segment_length(&SegmentConfig { beta_ms: 30_000, ..cfg }).unwrap();
    v.record(
        "3",
        "segment planner",
        n == 4 && p.r2_met && rules && capped.n == 2 && !capped.r2_met,
        format!("n={n} (rules hold: {rules}); beta 30s -> n={} with R2 warning: {}", capped.n, !capped.r2_met),
    );
}

fn grid(model: RaceModel) -> Vec<RaceResult> {
    let base = RaceConfig { trials: MC_TRIALS, master_seed: MASTER_SEED, ..Default::default() };
    run_grid(model, &GRID_NODES, &GRID_LENGTHS, &base)
}

fn c4_monte_carlo(v: &mut Verdicts, cheat: &[RaceResult], rebranch: &[RaceResult], elapsed: Duration) {
    let all: Vec<&RaceResult> = cheat.iter().chain(rebranch).collect();
    let within = all.iter().filter(|r| r.sigmas_from(closed_form(r.model, r.n, r.l)) <= MC_SIGMAS).count();
    let plug_in = all
        .iter()
        .filter(|r| (r.estimate - closed_form(r.model, r.n, r.l)).abs() <= MC_SIGMAS * r.stderr)
        .count();
    let worst = all
        .iter()
        .map(|r| r.sigmas_from(closed_form(r.model, r.n, r.l)))
        .fold(0.0f64, f64::max);
    v.record(
        "4",
        "Monte-Carlo vs closed form",
        within >= MC_MIN_CELLS && all.len() == 84 && elapsed <= MC_BUDGET,
        format!(
            "{within}/{} cells within {MC_SIGMAS} sigma (worst {worst:.2}), {:.1}s; plug-in stderr reading: {plug_in}/{}",
            all.len(),
            elapsed.as_secs_f64(),
            all.len()
        ),
    );
}

fn cell(rows: &[RaceResult], n: u64, l: u64) -> f64 {
    rows.iter().find(|r| r.n == n && r.l == l).expect("cell").estimate
}

fn c5_trends(v: &mut Verdicts, cheat: &[RaceResult], rebranch: &[RaceResult]) {
    let mut bad = Vec::new();
    for &n in &GRID_NODES {
        for w in GRID_LENGTHS.windows(2) {
            if cell(cheat, n, w[1]) <= cell(cheat, n, w[0]) {
                bad.push(format!("n={n} L={}", w[1]));
            }
        }
    }
    v.record("5a", "cheat strictly increasing in L", bad.is_empty(), violations(&bad, 36));

    let mut bad = Vec::new();
    for &l in &GRID_LENGTHS {
        for w in GRID_NODES.windows(2) {
            if cell(cheat, w[1], l) >= cell(cheat, w[0], l) {
                bad.push(format!("L={l} n={}", w[1]));
            }
        }
    }
    v.record("5b", "cheat strictly decreasing in n", bad.is_empty(), violations(&bad, 35));

    let mut bad = Vec::new();
    for &l in &GRID_LENGTHS {
        for w in GRID_NODES.windows(2) {
            if cell(rebranch, w[1], l) >= cell(rebranch, w[0], l) {
                bad.push(format!("L={l} n={}->{} ({}->{})", w[0], w[1], cell(rebranch, w[0], l), cell(rebranch, w[1], l)));
            }
        }
    }
    v.record("5c", "rebranch strictly decreasing in n", bad.is_empty(), violations(&bad, 35));

    let over: Vec<String> = GRID_LENGTHS
        .iter()
        .flat_map(|&l| {
            [(RaceModel::Cheat, cell(cheat, 2048, l)), (RaceModel::Rebranch, cell(rebranch, 2048, l))]
                .into_iter()
                .filter(|(_, p)| *p >= N2048_CEILING)
                .map(move |(m, p)| format!("{} L={l} {:.3}%", m.name(), 100.0 * p))
        })
        .collect();
    v.record("5d", "n=2048 estimates below 0.2%", over.is_empty(), violations(&over, 14));
}

fn violations(bad: &[String], total: usize) -> String {
    if bad.is_empty() {
        format!("0/{total} violations")
    } else {
        let shown: Vec<&str> = bad.iter().take(4).map(String::as_str).collect();
        format!("{}/{total} violations, e.g. {}", bad.len(), shown.join("; "))
    }
}

fn c6_collective(v: &mut Verdicts) {
    // producer history: one accumulator, ten honest calls
    let mut chain = ChainView::with_genesis(ChainId::Producer, 0, 1 << 20);
    let deploy = Transaction::new(1, TxPayload::Deploy { code: vm::accumulator_contract(false), init_params: vec![] }, 0);
    let mut inst = vm::deploy(&vm::accumulator_contract(false), &[], &deploy.id(), 0).unwrap();
    let mut txs = vec![deploy];
    for i in 0..10 {
        let t = Transaction::new(
            2,
            TxPayload::Invoke { contract_id: inst.contract_id, method: "push".into(), params: vec![i] },
            i as u64 + 1,
        );
        let res = vm::invoke(&mut inst, "push", &[i], vm::seed_for(&t.id()), 0).unwrap();
        txs.push(t.with_claimed_result(res.result_bytes));
    }
    let mut bundles = Vec::new();
    for chunk in txs.chunks(3) {
        let tip = chain.tip().header.clone();
        let b = seal_block(&tip, chunk.to_vec(), None, 0, 0, 1 << 20).unwrap();
        bundles.extend(export_cross_txs(&b, |_| true));
        chain.apply_block(b).unwrap();
    }
    let mut store = HeaderImportStore::new(chain.genesis().header.clone(), 0);
    store.import_headers(&export_headers(&chain, 1, chain.height()).unwrap()).unwrap();
    let mut storage = StorageNode::new(0, store, &bundles).unwrap();
    let workload = storage.workload();
    let shared = collective_validate(&storage, &[1, 2], &workload, 0);
    let solo = individual_validate(&storage, &[0, 1, 2], 0);
    let requesters_zero = shared.producer_bytes[&1] == 0 && shared.producer_bytes[&2] == 0;
    let smaller = shared.total_bytes() < solo.total_bytes();
    let r_ind = solo.producer_bytes[&1];
    let r_shared = shared.producer_bytes[&1];
    let s = resource_savings(2, r_ind, r_shared).unwrap();
    let exact = s.savings == 2 * (r_ind - r_shared) as u128 && s.savings == (solo.total_bytes() - shared.total_bytes()) as u128;
    let honest = shared.all_match() && solo.all_match();
    storage.online = false;
    let down = collective_validate(&storage, &[1, 2], &workload, 0);
    let no_false_match = down
        .outcomes
        .values()
        .all(|o| o.len() == workload.len() && o.iter().all(|x| matches!(x.verdict, Verdict::Inconclusive(_))));
    let series = run_storage_scenario(&StorageConfig::default());
    v.record(
        "6",
        "collective-validation accounting",
        requesters_zero && smaller && exact && honest && no_false_match && series.savings_consistent,
        format!(
            "shared {} B vs non-shared {} B, S={} B, offline -> all inconclusive: {no_false_match}",
            shared.total_bytes(),
            solo.total_bytes(),
            s.savings
        ),
    );
}

fn c7_burden(v: &mut Verdicts) {
    let code = vm::random_sum_contract(500, false);
    let (t1, t2) = (5_000u64, 12_000u64);
    let deploy = Transaction::new(1, TxPayload::Deploy { code: code.clone(), init_params: vec![] }, 0);
    let mut classic = vm::deploy(&code, &[], &deploy.id(), t1).unwrap();
    let call = Transaction::new(
        1,
        TxPayload::Invoke { contract_id: classic.contract_id, method: "run".into(), params: vec![] },
        1,
    );
    vm::invoke(&mut classic, "run", &[], vm::seed_for(&call.id()), 8_000).unwrap();
    let classic_burden = compute_burden(&classic, &[deploy.clone(), call.clone()], Some(8_000)).unwrap();

    let embedded_tx = Transaction::new(
        1,
        TxPayload::EmbeddedDeployInvoke { code: code.clone(), init_params: vec![], method: "run".into(), params: vec![] },
        2,
    );
    let (emb, _) = vm::deploy_embedded(&embedded_tx, 8_000).unwrap();
    let embedded_burden = compute_burden(&emb, std::slice::from_ref(&embedded_tx), Some(8_000)).unwrap();
    let one_fewer = embedded_burden.transaction_numbers + 1 == classic_burden.transaction_numbers;

    let dcode = vm::random_sum_contract(500, true);
    let dtx = Transaction::new(
        1,
        TxPayload::EmbeddedDeployInvoke { code: dcode.clone(), init_params: vec![], method: "run".into(), params: vec![] },
        3,
    );
    let (disp_emb, _) = vm::deploy_embedded(&dtx, 9_000).unwrap();
    let mut disp_classic = vm::deploy(&dcode, &[], &xchainlab::Hash256([9; 32]), 1_000).unwrap();
    vm::invoke(&mut disp_classic, "run", &[], 1, 9_500).unwrap();
    let zero = compute_burden(&disp_emb, &[], None).unwrap().time_occupation == 0
        && compute_burden(&disp_classic, &[], None).unwrap().time_occupation == 0;

    let mut term = vm::deploy(&code, &[], &deploy.id(), t1).unwrap();
    vm::terminate(&mut term, t2).unwrap();
    let span = compute_burden(&term, &[], None).unwrap().time_occupation;
    v.record(
        "7",
        "burden metrics",
        one_fewer && zero && span == t2 - t1,
        format!(
            "classic {} tx vs embedded {} tx, disposable occupation 0: {zero}, t2-t1 = {span} ms",
            classic_burden.transaction_numbers, embedded_burden.transaction_numbers
        ),
    );
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn c8_determinism(v: &mut Verdicts) {
    let bin = env!("CARGO_BIN_EXE_xchainlab");
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let scratch = std::env::temp_dir().join(format!("xchainlab-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&scratch).unwrap();
    let mut mismatches = Vec::new();
    let mut artifacts = 0;
    let mut go = |label: &str, args: Vec<String>, outputs: &[&str]| {
        let mut digests = Vec::new();
        for round in 0..2 {
            let dir = scratch.join(format!("{label}-{round}"));
            std::fs::create_dir_all(&dir).unwrap();
            let args: Vec<String> = args.iter().map(|a| a.replace("{dir}", dir.to_str().unwrap())).collect();
            let out = Command::new(bin).args(&args).current_dir(&root).output().unwrap();
            let mut d: Vec<String> = outputs.iter().map(|f| digest(&dir.join(f))).collect();
            d.push(hex::encode(Sha256::digest(&out.stdout)));
            d.push(out.status.code().unwrap_or(-1).to_string());
            digests.push(d);
        }
        artifacts += outputs.len() + 1;
        if digests[0] != digests[1] {
            mismatches.push(label.to_string());
        }
    };
    let s = |x: &str| x.to_string();
    for name in ["honest", "tamper"] {
        go(
            name,
            vec![
                s("run"),
                format!("scenarios/{name}.scenario"),
                s("--out"),
                s("{dir}/report.json"),
                s("--validation-csv"),
                s("{dir}/validation.csv"),
                s("--confirmation-log"),
                s("{dir}/confirm.jsonl"),
            ],
            &["report.json", "validation.csv", "confirm.jsonl"],
        );
    }
    for model in ["cheat", "rebranch"] {
        go(
            model,
            vec![s("simulate"), s(model), s("--trials"), s("20000"), s("--seed"), s("7"), s("--out"), s("{dir}/grid.csv")],
            &["grid.csv"],
        );
    }
    go("storage", vec![s("storage"), s("--seed"), s("3"), s("--out"), s("{dir}/storage.csv")], &["storage.csv"]);
    go("plan", vec![s("plan-segment"), s("--header-size"), s("80")], &[]);

    let cfg = RaceConfig { producer_nodes: 32, segment_length: 6, trials: 50_000, master_seed: 5, ..Default::default() };
    let par_eq_seq = estimate(RaceModel::Cheat, &cfg) == estimate_sequential(RaceModel::Cheat, &cfg)
        && estimate(RaceModel::Rebranch, &cfg) == estimate_sequential(RaceModel::Rebranch, &cfg);
    let _ = std::fs::remove_dir_all(&scratch);
    v.record(
        "8",
        "determinism",
        mismatches.is_empty() && par_eq_seq,
        format!(
            "{artifacts} artifacts digested twice, mismatches: {}; parallel == sequential: {par_eq_seq}",
            if mismatches.is_empty() { s("none") } else { mismatches.join(",") }
        ),
    );
}

fn main() {
    let mut v = Verdicts { failed: 0 };
    c1_tamper_detection(&mut v);
    c2_gap_rejection(&mut v);
    c3_segment_planner(&mut v);
    let start = Instant::now();
    let cheat = grid(RaceModel::Cheat);
    let rebranch = grid(RaceModel::Rebranch);
    let elapsed = start.elapsed();
    c4_monte_carlo(&mut v, &cheat, &rebranch, elapsed);
    c5_trends(&mut v, &cheat, &rebranch);
    c6_collective(&mut v);
    c7_burden(&mut v);
    c8_determinism(&mut v);
    println!("acceptance: {} failing", v.failed);
    if v.failed > 0 {
        std::process::exit(1);
    }
}
