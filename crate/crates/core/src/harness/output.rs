use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::audit::AuditReport;
use super::config::{ConfigError, ExperimentConfig};
use super::growth::GrowthReport;
use super::metrics::{GrowthRow, MetricsReport};
use super::sweep::SweepReport;
use super::world::{run_experiment, RunOutput};
use crate::ledger::ExportError;

pub const REPORT_FILE: &str = "report.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const CHAINS_DIR: &str = "chains";

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Export(#[from] ExportError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io { path: path.to_path_buf(), source }
}

#[derive(Serialize)]
struct ChainRow {
    seed: u64,
    chain_id: String,
    labels: String,
    subscribers: usize,
    convergence_time: Option<f64>,
    whitelists_agree: bool,
    final_whitelist_size: usize,
    canonical_height: u64,
    forks_created: usize,
    forks_rejected: usize,
    persistent_forks: usize,
    last_growth_time: Option<f64>,
    tail_growth_blocks: usize,
    attack_admitted: bool,
    admitted_fraction: f64,
}

#[derive(Serialize)]
struct DeviceRow<'a> {
    seed: u64,
    node: usize,
    address: String,
    device: &'a str,
    label: &'a str,
    infected: bool,
    legit_forwarded: u64,
    legit_dropped: u64,
    attack_forwarded: u64,
    attack_dropped: u64,
    profile_passed: u64,
    blocks_mined: u64,
}

#[derive(Serialize)]
struct GrowthCsvRow<'a> {
    seed: u64,
    chain: &'a str,
    bucket_start: f64,
    blocks: u64,
    bytes: u64,
    mean_size: f64,
}

fn csv_file<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), OutputError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn report_json(report: &MetricsReport) -> Result<String, serde_json::Error> {
    pretty(report)
}

fn pretty<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    fs::write(path, pretty(value)?).map_err(io_err(path))
}

/// sweep.json plus the per-fraction and per-run tables.
pub fn write_sweep(dir: &Path, sweep: &SweepReport) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    json_file(&dir.join("sweep.json"), sweep)?;
    csv_file(&dir.join("sweep.csv"), &sweep.points)?;
    csv_file(&dir.join("sweep_runs.csv"), &sweep.runs)
}

#[derive(Serialize)]
struct ForkRow {
    chain_id: String,
    fork_height: u64,
    length: u64,
    blocks: usize,
    miners: usize,
    anomalous: String,
    first_time: f64,
    last_time: f64,
}

/// audit.json plus one row per rejected fork.
pub fn write_audit(dir: &Path, report: &AuditReport) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    json_file(&dir.join("audit.json"), report)?;
    let rows = report.chains.iter().flat_map(|c| {
        c.rejected_forks.iter().map(|f| ForkRow {
            chain_id: c.chain_id.to_hex(),
            fork_height: f.fork_height,
            length: f.length,
            blocks: f.blocks.len(),
            miners: f.miners.len(),
            anomalous: f.anomalous.iter().map(|s| s.to_hex()).collect::<Vec<_>>().join(";"),
            first_time: f.first_time.as_secs_f64(),
            last_time: f.last_time.as_secs_f64(),
        })
    });
    csv_file(&dir.join("rejected_forks.csv"), rows)
}

/// growth_report.json plus the per-chain and per-bucket tables.
pub fn write_growth(dir: &Path, report: &GrowthReport) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    json_file(&dir.join("growth_report.json"), report)?;
    csv_file(&dir.join("growth_chains.csv"), &report.chains)?;
    csv_file(&dir.join("growth_buckets.csv"), &report.rows)
}

pub fn write_report_csvs(dir: &Path, report: &MetricsReport) -> Result<(), OutputError> {
    let seed = report.seed;
    csv_file(
        &dir.join("chains.csv"),
        report.chains.iter().map(|c| ChainRow {
            seed,
            chain_id: c.chain_id.to_hex(),
            labels: c.labels.join(";"),
            subscribers: c.subscribers,
            convergence_time: c.convergence_time,
            whitelists_agree: c.whitelists_agree,
            final_whitelist_size: c.final_whitelist_size,
            canonical_height: c.canonical_height,
            forks_created: c.forks_created,
            forks_rejected: c.forks_rejected,
            persistent_forks: c.persistent_forks,
            last_growth_time: c.last_growth_time,
            tail_growth_blocks: c.tail_growth_blocks,
            attack_admitted: c.attack_admitted,
            admitted_fraction: c.admitted_fraction,
        }),
    )?;
    csv_file(
        &dir.join("sentinels.csv"),
        report.nodes.iter().flat_map(|n| {
            n.devices.iter().map(move |d| DeviceRow {
                seed,
                node: n.node,
                address: n.address.to_hex(),
                device: &d.device,
                label: &d.label,
                infected: d.infected,
                legit_forwarded: d.tally.legit_forwarded,
                legit_dropped: d.tally.legit_dropped,
                attack_forwarded: d.tally.attack_forwarded,
                attack_dropped: d.tally.attack_dropped,
                profile_passed: d.tally.profile_passed,
                blocks_mined: n.blocks_mined,
            })
        }),
    )?;
    csv_file(&dir.join("growth.csv"), report.growth.iter().map(|r: &GrowthRow| GrowthCsvRow {
        seed,
        chain: &r.chain,
        bucket_start: r.bucket_start,
        blocks: r.blocks,
        bytes: r.bytes,
        mean_size: r.mean_size,
    }))
}

/// Writes report.json, the CSV tables, the event log and the chain exports.
pub fn write_run(dir: &Path, run: &RunOutput) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(REPORT_FILE);
    fs::write(&path, report_json(&run.report)?).map_err(io_err(&path))?;
    write_report_csvs(dir, &run.report)?;
    if let Some(events) = &run.events {
        let path = dir.join(EVENTS_FILE);
        let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        for line in events {
            serde_json::to_writer(&mut f, line)?;
            f.write_all(b"\n").map_err(io_err(&path))?;
        }
        f.flush().map_err(io_err(&path))?;
    }
    run.archive.write_dir(&dir.join(CHAINS_DIR))?;
    Ok(())
}

pub fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed-{seed}"))
}

/// Runs every configured seed; with an output directory each run lands in
/// `seed-<n>/` beneath it.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<MetricsReport>, OutputError> {
    cfg.validate()?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_experiment(cfg, seed, cfg.output_dir.is_some())?;
        if let Some(base) = &cfg.output_dir {
            write_run(&seed_dir(base, seed), &run)?;
        }
        reports.push(run.report);
    }
    Ok(reports)
}
