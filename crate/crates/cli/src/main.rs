//! `herdwall`: run experiments, sweep attack fractions, tabulate chain
//! growth and audit exported chains.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use herdwall_core::harness::{
    audit, breaking_point_sweep, chain_growth_report, run_all, write_audit, write_growth, write_sweep, ConfigError,
    ExperimentConfig, OutputError, ProtocolConfig,
};
use herdwall_core::ledger::BlockArchive;

/// Exit status for configuration and validation failures.
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "herdwall", version, about = "Collaborative IoT whitelisting on a multichain ledger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every configured seed and write reports.
    Run(RunArgs),
    /// Admission probability of an EXFIL attack across infected fractions.
    Sweep(SweepArgs),
    /// Block count and size table for a finished run.
    Growth(GrowthArgs),
    /// Fork and transparency report for a run or chain export directory.
    Audit(AuditArgs),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this one seed.
    #[arg(short, long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    sentinels: Option<usize>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(dir) = &self.output {
            cfg.output_dir = Some(dir.clone());
        }
        if let Some(n) = self.sentinels {
            cfg.sentinels = n;
        }
        if let Some(d) = self.duration {
            cfg.duration = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Infected fractions, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.2, 0.4, 0.45, 0.55, 0.6, 0.8])]
    fractions: Vec<f64>,
    /// Seeds per fraction, counted up from the first configured seed.
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

#[derive(Args)]
struct LedgerArgs {
    /// Config whose protocol section supplies depth and margin.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory; JSON goes to stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    confirmations: Option<u64>,
    #[arg(long)]
    adoption_margin: Option<u64>,
}

impl LedgerArgs {
    fn protocol(&self) -> Result<ProtocolConfig, ConfigError> {
        let mut p = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?.protocol,
            None => ProtocolConfig::default(),
        };
        p.confirmations = self.confirmations.unwrap_or(p.confirmations);
        p.adoption_margin = self.adoption_margin.unwrap_or(p.adoption_margin);
        Ok(p)
    }
}

#[derive(Args)]
struct GrowthArgs {
    /// Run directory (with chains/) or a bare chain export.
    dir: PathBuf,
    #[command(flatten)]
    ledger: LedgerArgs,
    /// Bucket width in simulated seconds.
    #[arg(long, default_value_t = 3600.0)]
    bucket: f64,
}

#[derive(Args)]
struct AuditArgs {
    /// Run directory (with chains/) or a bare chain export.
    dir: PathBuf,
    #[command(flatten)]
    ledger: LedgerArgs,
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<ConfigError>()
            || e.downcast_ref::<OutputError>().is_some_and(|o| matches!(o, OutputError::Config(_)))
            || e.is::<herdwall_core::harness::AuditError>()
    })
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let reports = run_all(&cfg)?;
    match &cfg.output_dir {
        Some(dir) => {
            for r in &reports {
                let converged = r.chains.iter().filter(|c| c.whitelists_agree).count();
                println!(
                    "seed {}: {} control blocks, {}/{} chains agreed, attack admitted: {}",
                    r.seed,
                    r.control.canonical_height,
                    converged,
                    r.chains.len(),
                    r.admitted()
                );
            }
            info!("reports in {}", dir.display());
        }
        None => print_json(&reports)?,
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let sweep = breaking_point_sweep(&cfg, &args.fractions, args.reps)?;
    if !sweep.monotone {
        warn!("admission curve is not monotone");
    }
    match &cfg.output_dir {
        Some(dir) => {
            write_sweep(dir, &sweep)?;
            for p in &sweep.points {
                println!("f={:.2} P(admit)={:.2} ({}/{})", p.fraction, p.probability, p.admitted, p.runs);
            }
        }
        None => print_json(&sweep)?,
    }
    Ok(())
}

fn chains_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("chains");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn cmd_growth(args: &GrowthArgs) -> Result<()> {
    if !(args.bucket > 0.0 && args.bucket.is_finite()) {
        return Err(ConfigError::Invalid(format!("bucket must be positive, got {}", args.bucket)).into());
    }
    let protocol = args.ledger.protocol()?;
    let src = chains_dir(&args.dir);
    let (archive, errors) = BlockArchive::read_dir(&src).with_context(|| format!("reading {}", src.display()))?;
    for e in &errors {
        warn!("{e}");
    }
    let report = chain_growth_report(&archive, args.bucket, protocol.adoption_margin);
    match &args.ledger.output {
        Some(dir) => {
            write_growth(dir, &report)?;
            println!(
                "+{} B per header, {} control blocks, mean interval {:.2} s, {:.0} B/year",
                report.header_increment,
                report.chains.first().map_or(0, |c| c.blocks),
                report.mean_interval.unwrap_or(f64::NAN),
                report.bytes_per_year
            );
        }
        None => print_json(&report)?,
    }
    Ok(())
}

fn cmd_audit(args: &AuditArgs) -> Result<()> {
    let protocol = args.ledger.protocol()?;
    let report = audit(&args.dir, protocol.confirmations, protocol.adoption_margin)?;
    for e in &report.errors {
        warn!("{e}");
    }
    match &args.ledger.output {
        Some(dir) => {
            write_audit(dir, &report)?;
            for c in &report.chains {
                println!(
                    "{}: height {}, {} confirmed signatures, {} rejected forks, {} anomalous signatures",
                    c.chain_id.short(),
                    c.canonical_height,
                    c.confirmed_whitelist.len(),
                    c.rejected_forks.len(),
                    c.rejected_signatures().len()
                );
            }
        }
        None => print_json(&report)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Growth(a) => cmd_growth(a),
        Command::Audit(a) => cmd_audit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { 1 })
        }
    }
}
