use serde::{Deserialize, Serialize};

use super::metrics::{growth_rows, GrowthRow};
use super::view::{detect_mode, LedgerView};
use crate::digest::BlockHash;
use crate::ledger::{BlockArchive, ControlBlock};

const SECONDS_PER_YEAR: f64 = 365.0 * 24.0 * 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainGrowth {
    pub chain: String,
    pub blocks: u64,
    pub bytes: u64,
    pub mean_size: f64,
    pub bytes_per_year: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub bucket: f64,
    pub span: f64,
    pub rows: Vec<GrowthRow>,
    pub chains: Vec<ChainGrowth>,
    /// Encoded size added by one more listed header.
    pub header_increment: u64,
    /// Least-squares slope of control size against header count, when the
    /// header count varies.
    pub fitted_header_bytes: Option<f64>,
    pub control_base_bytes: u64,
    pub mean_interval: Option<f64>,
    pub first_quarter_mean_size: Option<f64>,
    pub last_quarter_mean_size: Option<f64>,
    pub bytes_per_year: f64,
}

impl GrowthReport {
    /// Relative change of mean control block size between the first and
    /// last quarter of the run.
    pub fn quarter_drift(&self) -> Option<f64> {
        let (a, b) = (self.first_quarter_mean_size?, self.last_quarter_mean_size?);
        Some((b - a).abs() / a)
    }
}

fn header_increment() -> u64 {
    let mut block = ControlBlock::genesis();
    let base = block.encode().len();
    block.whitelist_headers.push(BlockHash::ZERO);
    (block.encode().len() - base) as u64
}

fn slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Size table over the canonical chains of an archive.
pub fn chain_growth_report(archive: &BlockArchive, bucket: f64, adoption_margin: u64) -> GrowthReport {
    let view = LedgerView::from_archive(archive, detect_mode(archive), 0, adoption_margin);
    let control = view.canonical_control();
    let mined: Vec<_> = control.iter().skip(1).collect();
    let span = mined.last().map_or(0.0, |n| n.block.timestamp.as_secs_f64());

    let points: Vec<(f64, f64)> =
        mined.iter().map(|n| (n.block.whitelist_headers.len() as f64, n.block.encoded_len() as f64)).collect();
    let mean_interval = match (mined.first(), mined.last()) {
        (Some(a), Some(b)) if mined.len() > 1 => {
            Some((b.block.timestamp.as_secs_f64() - a.block.timestamp.as_secs_f64()) / (mined.len() - 1) as f64)
        }
        _ => None,
    };
    let quarter_mean = |lo: f64, hi: f64| {
        let sizes: Vec<f64> = mined
            .iter()
            .filter(|n| {
                let t = n.block.timestamp.as_secs_f64();
                t >= lo && t < hi
            })
            .map(|n| n.block.encoded_len() as f64)
            .collect();
        (!sizes.is_empty()).then(|| sizes.iter().sum::<f64>() / sizes.len() as f64)
    };

    let mut chains = vec![summarise("control".into(), mined.iter().map(|n| n.block.encoded_len()), span)];
    for id in view.chains() {
        let branch = view.canonical_branch(&id);
        chains.push(summarise(id.to_hex(), branch.iter().map(|n| n.block.encoded_len()), span));
    }
    let bytes_per_year = chains.iter().map(|c| c.bytes_per_year).sum();

    GrowthReport {
        bucket,
        span,
        rows: growth_rows(&view, bucket),
        chains,
        header_increment: header_increment(),
        fitted_header_bytes: if points.is_empty() { None } else { slope(&points) },
        control_base_bytes: crate::ledger::CONTROL_BASE_LEN as u64,
        mean_interval,
        first_quarter_mean_size: quarter_mean(0.0, span / 4.0),
        last_quarter_mean_size: quarter_mean(span * 0.75, f64::INFINITY),
        bytes_per_year,
    }
}

fn summarise(chain: String, sizes: impl Iterator<Item = usize>, span: f64) -> ChainGrowth {
    let (blocks, bytes) = sizes.fold((0u64, 0u64), |(b, s), x| (b + 1, s + x as u64));
    ChainGrowth {
        chain,
        blocks,
        bytes,
        mean_size: if blocks > 0 { bytes as f64 / blocks as f64 } else { 0.0 },
        bytes_per_year: if span > 0.0 { bytes as f64 / span * SECONDS_PER_YEAR } else { 0.0 },
    }
}
