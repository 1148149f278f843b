use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AttackConfig, ConfigError, ExperimentConfig};
use super::world::run_experiment;
use crate::devsim::AttackKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub fraction: f64,
    pub seed: u64,
    pub admitted: bool,
    pub admitted_fraction: f64,
    pub infected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub runs: usize,
    pub admitted: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
    pub runs: Vec<SweepRun>,
    /// Probability non-decreasing in the fraction.
    pub monotone: bool,
}

impl SweepReport {
    pub fn probability(&self, fraction: f64) -> Option<f64> {
        self.points.iter().find(|p| (p.fraction - fraction).abs() < 1e-12).map(|p| p.probability)
    }
}

/// EXFIL admission frequency per infected fraction. Repetition `r` uses
/// seed `base.seeds[0] + r`; runs execute in parallel.
pub fn breaking_point_sweep(base: &ExperimentConfig, fractions: &[f64], repetitions: usize) -> Result<SweepReport, ConfigError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(ConfigError::Invalid("sweep fractions must lie in [0, 1]".into()));
    }
    if repetitions == 0 {
        return Err(ConfigError::Invalid("repetitions must be at least 1".into()));
    }
    let first = base.seeds.first().copied().unwrap_or(1);
    let seeds: Vec<u64> = (0..repetitions as u64).map(|r| first + r).collect();
    let mut fractions: Vec<f64> = fractions.to_vec();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();

    let configs: Vec<ExperimentConfig> = fractions
        .iter()
        .map(|&f| {
            let mut cfg = base.clone();
            let attack = base.attack.clone().unwrap_or_default();
            cfg.attack = Some(AttackConfig { kind: AttackKind::Exfil, fraction: f, ..attack });
            cfg.output_dir = None;
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let report = run_experiment(&configs[i], seed, false).map(|r| r.report)?;
            let attack = report.attack.as_ref().expect("sweep configs carry an attack");
            Ok(SweepRun {
                fraction: fractions[i],
                seed,
                admitted: attack.admitted,
                admitted_fraction: attack.admitted_fraction,
                infected: attack.infected_devices.len(),
            })
        })
        .collect::<Result<_, ConfigError>>()?;

    let points: Vec<SweepPoint> = fractions
        .iter()
        .map(|&f| {
            let mine: Vec<_> = runs.iter().filter(|r| r.fraction == f).collect();
            let admitted = mine.iter().filter(|r| r.admitted).count();
            SweepPoint { fraction: f, runs: mine.len(), admitted, probability: admitted as f64 / mine.len() as f64 }
        })
        .collect();
    let monotone = points.windows(2).all(|w| w[0].probability <= w[1].probability);
    Ok(SweepReport { seeds, points, runs, monotone })
}
