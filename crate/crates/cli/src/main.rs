//! `xchainlab` command-line front end.
//!
//! Exit codes: 0 clean, 2 validation failure, 3 configuration error,
//! 1 for anything else (I/O and the like).

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use xchainlab::confirmation::{plan_segment_length, write_confirmation_log, PlanError, SegmentConfig};
use xchainlab::scenario::{self, RunError, Scenario, EXIT_CONFIG_ERROR};
use xchainlab::scl::write_validation_csv;
use xchainlab::simlab::{
    closed_form, run_grid, run_storage_scenario, write_grid_csv, write_storage_csv, RaceConfig, RaceModel, Sampling,
    StorageConfig,
};

#[derive(Parser)]
#[command(name = "xchainlab", version, about = "Cross-chain smart contract validation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end and emit a JSON report.
    Run {
        scenario: PathBuf,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        validation_csv: Option<PathBuf>,
        #[arg(long)]
        confirmation_log: Option<PathBuf>,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte-Carlo cheat or rebranch grid.
    Simulate {
        model: ModelArg,
        #[arg(long, value_delimiter = ',', default_values_t = [2u64, 8, 32, 128, 512, 2048])]
        nodes: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_values_t = [2u64, 3, 4, 5, 6, 7, 8])]
        lengths: Vec<u64>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, env = "XCHAINLAB_SEED", default_value_t = 0)]
        seed: u64,
        /// Mean block time of one node, seconds.
        #[arg(long, default_value_t = 10.0)]
        avg_mining_time: f64,
        #[arg(long, value_enum, default_value_t = SamplingArg::Network)]
        sampling: SamplingArg,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Choose a segment length from R1–R3.
    PlanSegment {
        #[arg(long, default_value_t = 0.3)]
        p_fake: f64,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = 300_000)]
        beta_ms: u64,
        #[arg(long, default_value_t = 10_000)]
        block_time_ms: u64,
        #[arg(long, default_value_t = 91)]
        header_size: u64,
        #[arg(long, default_value_t = 1_048_576)]
        block_size: u64,
    },
    /// Shared versus non-shared producer-data storage over time.
    Storage {
        #[arg(long, default_value_t = 2)]
        sharers: u64,
        #[arg(long, default_value_t = 1000)]
        tx_interval_ms: u64,
        #[arg(long, default_value_t = 10_000)]
        sample_interval_ms: u64,
        #[arg(long, default_value_t = 300_000)]
        duration_ms: u64,
        #[arg(long, env = "XCHAINLAB_SEED", default_value_t = 0)]
        seed: u64,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Cheat,
    Rebranch,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Network,
    PerNode,
}

/// Writes via a sibling temp file and rename, so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().context("output path has no file name")?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, bytes),
        None => {
            io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn cmd_run(
    path: &Path,
    out: Option<&Path>,
    validation_csv: Option<&Path>,
    confirmation_log: Option<&Path>,
    seed: Option<u64>,
) -> Result<u8> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut sc = match Scenario::parse(&text) {
        Ok(sc) => sc,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return Ok(EXIT_CONFIG_ERROR as u8);
        }
    };
    if let Some(s) = seed {
        sc.seed = s;
    }
    let output = match scenario::run(&sc) {
        Ok(o) => o,
        Err(RunError::Config(e)) => {
            eprintln!("{}: {e}", path.display());
            return Ok(EXIT_CONFIG_ERROR as u8);
        }
        Err(e) => return Err(e.into()),
    };
    // render everything before touching the filesystem
    let report = scenario::report_json(&output.report);
    let csv = match validation_csv {
        Some(_) => {
            let mut buf = Vec::new();
            write_validation_csv(&output.outcomes, &mut buf)?;
            Some(buf)
        }
        None => None,
    };
    let log = match confirmation_log {
        Some(_) => {
            let mut buf = Vec::new();
            write_confirmation_log(&output.log, &mut buf)?;
            Some(buf)
        }
        None => None,
    };
    if let (Some(p), Some(b)) = (validation_csv, csv) {
        write_atomic(p, &b)?;
    }
    if let (Some(p), Some(b)) = (confirmation_log, log) {
        write_atomic(p, &b)?;
    }
    emit(out, report.as_bytes())?;
    let r = &output.report;
    eprintln!(
        "producer height {}, consumer height {}, segments {}, match {}, mismatch {}, inconclusive {}",
        r.producer.height,
        r.consumer.height,
        r.segments_confirmed,
        r.validation.matched,
        r.validation.mismatched,
        r.validation.inconclusive
    );
    Ok(r.exit_status as u8)
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    model: ModelArg,
    nodes: &[u64],
    lengths: &[u64],
    trials: u64,
    seed: u64,
    avg_mining_time: f64,
    sampling: SamplingArg,
    out: Option<&Path>,
) -> Result<u8> {
    if nodes.is_empty() || lengths.is_empty() || nodes.contains(&0) || lengths.contains(&0) {
        eprintln!("--nodes and --lengths must be non-empty lists of positive integers");
        return Ok(EXIT_CONFIG_ERROR as u8);
    }
    if !avg_mining_time.is_finite() || avg_mining_time <= 0.0 {
        eprintln!("--avg-mining-time must be positive");
        return Ok(EXIT_CONFIG_ERROR as u8);
    }
    let model = match model {
        ModelArg::Cheat => RaceModel::Cheat,
        ModelArg::Rebranch => RaceModel::Rebranch,
    };
    let base = RaceConfig {
        avg_mining_time,
        trials,
        master_seed: seed,
        sampling: match sampling {
            SamplingArg::Network => Sampling::NetworkMinimum,
            SamplingArg::PerNode => Sampling::PerNode,
        },
        ..Default::default()
    };
    let rows = run_grid(model, nodes, lengths, &base);
    let mut buf = Vec::new();
    write_grid_csv(&rows, &mut buf)?;
    emit(out, &buf)?;
    let mut summary = String::new();
    summary.push_str(&format!("{:>6} {:>3} {:>12} {:>12} {:>12} {:>7}\n", "n", "L", "estimate", "stderr", "closed", "sigma"));
    for r in &rows {
        let p0 = closed_form(model, r.n, r.l);
        summary.push_str(&format!(
            "{:>6} {:>3} {:>12.6} {:>12.6} {:>12.6} {:>7.2}\n",
            r.n,
            r.l,
            r.estimate,
            r.stderr,
            p0,
            r.sigmas_from(p0)
        ));
    }
    // keep stdout clean when it carries the CSV
    if out.is_some() {
        print!("{summary}");
    } else {
        eprint!("{summary}");
    }
    Ok(0)
}

fn cmd_plan(cfg: SegmentConfig) -> Result<u8> {
    match plan_segment_length(&cfg) {
        Ok(p) => {
            println!("n = {}", p.n);
            println!("R1: n * {} < {}  ->  n <= {}", cfg.header_size, cfg.max_block_size, p.r1_max);
            match p.r2_min {
                Some(m) => println!("R2: {}^n < {}  ->  n >= {}", cfg.p_fake_avg, cfg.delta, m),
                None => println!("R2: {}^n < {}  ->  unreachable", cfg.p_fake_avg, cfg.delta),
            }
            println!("R3: n * {} < {}  ->  n <= {}", cfg.avg_block_time_ms, cfg.beta_ms, p.r3_max);
            if p.r2_met {
                println!("all rules satisfied");
            } else {
                println!(
                    "warning: R2 unmet; {}^{} = {:.6} >= {}",
                    cfg.p_fake_avg,
                    p.n,
                    cfg.p_fake_avg.powi(p.n as i32),
                    cfg.delta
                );
            }
            Ok(0)
        }
        Err(PlanError::Infeasible(rule)) => {
            eprintln!("infeasible: n = 1 violates {rule}");
            Ok(EXIT_CONFIG_ERROR as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            Ok(EXIT_CONFIG_ERROR as u8)
        }
    }
}

fn cmd_storage(cfg: StorageConfig, out: Option<&Path>) -> Result<u8> {
    if cfg.sharers == 0 || cfg.tx_interval_ms == 0 || cfg.sample_interval_ms == 0 {
        eprintln!("--sharers, --tx-interval-ms and --sample-interval-ms must be positive");
        return Ok(EXIT_CONFIG_ERROR as u8);
    }
    let report = run_storage_scenario(&cfg);
    let mut buf = Vec::new();
    write_storage_csv(&report, &mut buf)?;
    emit(out, &buf)?;
    let summary = format!(
        "shared total {} B, non-shared total {} B, savings {} B ({:.1}%), formula consistent: {}\n",
        report.shared_total,
        report.non_shared_total,
        report.savings,
        100.0 * report.savings_ratio,
        report.savings_consistent
    );
    if out.is_some() {
        print!("{summary}");
    } else {
        eprint!("{summary}");
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, out, validation_csv, confirmation_log, seed } => cmd_run(
            &scenario,
            out.as_deref(),
            validation_csv.as_deref(),
            confirmation_log.as_deref(),
            seed,
        ),
        Command::Simulate { model, nodes, lengths, trials, seed, avg_mining_time, sampling, out } => {
            cmd_simulate(model, &nodes, &lengths, trials, seed, avg_mining_time, sampling, out.as_deref())
        }
        Command::PlanSegment { p_fake, delta, beta_ms, block_time_ms, header_size, block_size } => {
            cmd_plan(SegmentConfig {
                header_size,
                max_block_size: block_size,
                p_fake_avg: p_fake,
                delta,
                beta_ms,
                avg_block_time_ms: block_time_ms,
                confirm_depth: 0,
            })
        }
        Command::Storage { sharers, tx_interval_ms, sample_interval_ms, duration_ms, seed, out } => cmd_storage(
            StorageConfig { tx_interval_ms, sample_interval_ms, duration_ms, sharers, seed },
            out.as_deref(),
        ),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
