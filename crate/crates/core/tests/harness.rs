use std::fs;

use herdwall_core::devsim::{AttackKind, LIFX_LIKE, PLUG_LIKE};
use herdwall_core::harness::{
    audit, audit_archive, breaking_point_sweep, report_json, run_all, run_experiment, seed_dir, write_run, AttackConfig,
    ConfigError, ExperimentConfig, World,
};

fn base(sentinels: usize, duration: f64) -> ExperimentConfig {
    ExperimentConfig { sentinels, duration, devices: vec![LIFX_LIKE.into(), PLUG_LIKE.into()], ..Default::default() }
}

fn exfil(fraction: f64) -> Option<AttackConfig> {
    Some(AttackConfig { kind: AttackKind::Exfil, fraction, ..Default::default() })
}

#[test]
fn clean_run_has_no_rejected_forks() {
    let run = run_experiment(&base(8, 3600.0), 4, false).unwrap();
    let report = audit_archive(&run.archive, 6, 1, None);
    assert!(!report.chains.is_empty());
    for chain in &report.chains {
        assert!(chain.rejected_forks.is_empty(), "{}: {:?}", chain.chain_id.short(), chain.rejected_forks);
    }
}

#[test]
fn twenty_honest_sentinels_raise_nothing() {
    let run = run_experiment(&base(20, 3600.0), 9, false).unwrap();
    assert!(run.report.attack.is_none());
    assert!(!run.report.admitted());
    for chain in &run.report.chains {
        assert_eq!(chain.persistent_forks, 0, "{:?}", chain.labels);
        assert!(!chain.attack_admitted);
        assert!(chain.whitelists_agree);
    }
}

#[test]
fn sweep_endpoints() {
    let mut cfg = base(10, 7200.0);
    cfg.seeds = vec![30];
    let sweep = breaking_point_sweep(&cfg, &[1.0, 0.0], 2).unwrap();
    assert_eq!(sweep.probability(0.0), Some(0.0));
    assert_eq!(sweep.probability(1.0), Some(1.0));
    assert!(sweep.monotone);
    assert_eq!(sweep.seeds, vec![30, 31]);
}

#[test]
fn sweep_rejects_bad_arguments() {
    assert!(breaking_point_sweep(&base(3, 60.0), &[1.5], 1).is_err());
    assert!(breaking_point_sweep(&base(3, 60.0), &[0.5], 0).is_err());
}

#[test]
fn audit_reports_a_corrupt_file_and_carries_on() {
    let mut cfg = base(6, 1800.0);
    cfg.attack = Some(AttackConfig { kind: AttackKind::Scan, fraction: 0.3, ..Default::default() });
    let run = run_experiment(&cfg, 2, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &run).unwrap();
    let clean = audit(dir.path(), 6, 1).unwrap();
    assert_eq!(clean.chains.len(), 2);
    assert!(clean.errors.is_empty());

    let victim = fs::read_dir(dir.path().join("chains"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy() != "control.jsonl")
        .unwrap();
    fs::write(&victim, "{ not json\n").unwrap();
    let broken = audit(dir.path(), 6, 1).unwrap();
    assert_eq!(broken.errors.len(), 1, "{:?}", broken.errors);
    assert!(broken.errors[0].contains(&*victim.file_name().unwrap().to_string_lossy()));
    assert_eq!(broken.chains.len(), 1);
}

#[test]
fn audit_of_missing_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(audit(&dir.path().join("nope"), 6, 1).is_err());
}

/// Most subscribers observe the attack flow well before its block is
/// buried deep enough to be enforced.
#[test]
fn observation_majority_precedes_enforcement() {
    let mut cfg = base(10, 5400.0);
    cfg.devices = vec![LIFX_LIKE.into()];
    cfg.attack = exfil(0.8);
    let run = run_experiment(&cfg, 5, true).unwrap();
    let report = audit_archive(&run.archive, cfg.protocol.confirmations, cfg.protocol.adoption_margin, run.events.as_deref());
    let sig = run.report.attack.as_ref().unwrap().signatures[0];
    let curve = report.chains.iter().flat_map(|c| &c.adoption).find(|a| a.signature == sig).expect("attack flow observed");
    let observed = curve.observed_majority_at.expect("majority observed");
    let whitelisted = curve.whitelisted_majority_at.expect("majority enforces it");
    assert!(observed < whitelisted, "{observed} vs {whitelisted}");
    let timeline = report.chains.iter().flat_map(|c| &c.signatures).find(|t| t.signature == sig).unwrap();
    assert!(observed < timeline.confirmed.unwrap());
}

#[test]
fn admitted_signatures_are_confirmed_on_the_ledger() {
    let mut cfg = base(10, 5400.0);
    cfg.attack = exfil(0.8);
    let run = run_experiment(&cfg, 8, false).unwrap();
    let attack = run.report.attack.as_ref().unwrap();
    assert!(attack.admitted);
    let report = audit_archive(&run.archive, cfg.protocol.confirmations, cfg.protocol.adoption_margin, None);
    assert!(run.report.admitted());
    let lifx = run.report.chain_by_label(LIFX_LIKE).unwrap();
    assert!(lifx.attack_admitted);
    let on_ledger = report.chain(&lifx.chain_id).unwrap();
    assert!(on_ledger.confirmed_whitelist.contains(&attack.signatures[0]));
    assert!(!report.rejected_signatures().contains(&attack.signatures[0]));
}

#[test]
fn run_all_writes_one_dir_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(3, 600.0);
    cfg.seeds = vec![3, 11];
    cfg.output_dir = Some(dir.path().to_path_buf());
    let reports = run_all(&cfg).unwrap();
    assert_eq!(reports.len(), 2);
    for seed in [3, 11] {
        let d = seed_dir(dir.path(), seed);
        assert!(d.ends_with(format!("seed-{seed}")));
        for f in ["report.json", "chains.csv", "sentinels.csv", "growth.csv", "events.jsonl"] {
            assert!(d.join(f).is_file(), "{f} missing for seed {seed}");
        }
        assert!(d.join("chains").join("control.jsonl").is_file());
    }
}

#[test]
fn unknown_trace_label_fails_before_running() {
    let mut cfg = base(3, 600.0);
    cfg.devices.push("toaster-like".into());
    assert!(matches!(World::new(&cfg, 1, false), Err(ConfigError::UnknownTrace(_))));
    assert!(run_experiment(&cfg, 1, false).is_err());
}

#[test]
fn same_seed_same_report() {
    let mut cfg = base(6, 1800.0);
    cfg.attack = Some(AttackConfig { kind: AttackKind::Flood, fraction: 0.5, ..Default::default() });
    let a = run_experiment(&cfg, 77, true).unwrap();
    let b = run_experiment(&cfg, 77, true).unwrap();
    assert_eq!(report_json(&a.report).unwrap(), report_json(&b.report).unwrap());
    assert_eq!(a.events, b.events);
    let c = run_experiment(&cfg, 78, false).unwrap();
    assert_ne!(report_json(&a.report).unwrap(), report_json(&c.report).unwrap());
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = base(4, 900.0);
    cfg.attack = exfil(0.25);
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert!(ExperimentConfig::from_toml_str("sentinels = 3\nbogus = 1\n").is_err());
}
