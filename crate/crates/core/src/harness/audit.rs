use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{CHAINS_DIR, EVENTS_FILE};
use super::view::{detect_mode, ForkInfo, LedgerView};
use super::world::LogLine;
use crate::digest::{ChainId, PacketSignature, SentinelAddress};
use crate::ledger::{BlockArchive, ExportError};
use crate::sentinel::{PeerId, SentinelEvent};

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("{0}: not a chain export directory")]
    NotAnExport(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignatureTimeline {
    pub signature: PacketSignature,
    /// Earliest block on any branch carrying it.
    pub first_seen: f64,
    pub canonical: bool,
    /// Canonical block that first listed it.
    pub included: Option<f64>,
    /// Time the inclusion block got buried under the confirmation depth.
    pub confirmed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdoptionPoint {
    pub time: f64,
    pub observed: f64,
    pub whitelisted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdoptionCurve {
    pub signature: PacketSignature,
    pub subscribers: usize,
    pub points: Vec<AdoptionPoint>,
    pub observed_majority_at: Option<f64>,
    pub whitelisted_majority_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainAudit {
    pub chain_id: ChainId,
    pub blocks: usize,
    pub canonical_height: u64,
    pub whitelist: Vec<PacketSignature>,
    pub confirmed_whitelist: Vec<PacketSignature>,
    /// On the canonical branch but not yet under the confirmation depth.
    pub unconfirmed: Vec<PacketSignature>,
    pub rejected_forks: Vec<ForkInfo>,
    /// Off-canonical branches that add nothing new.
    pub stale_branches: usize,
    pub signatures: Vec<SignatureTimeline>,
    /// Every non-genesis canonical block came from one sentinel.
    pub single_authority: Option<SentinelAddress>,
    pub adoption: Vec<AdoptionCurve>,
}

impl ChainAudit {
    pub fn rejected_signatures(&self) -> BTreeSet<PacketSignature> {
        self.rejected_forks.iter().flat_map(|f| f.anomalous.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub control_blocks: usize,
    pub control_height: u64,
    pub skipped_blocks: usize,
    pub confirmations: u64,
    pub chains: Vec<ChainAudit>,
    pub errors: Vec<String>,
}

impl AuditReport {
    pub fn chain(&self, id: &ChainId) -> Option<&ChainAudit> {
        self.chains.iter().find(|c| c.chain_id == *id)
    }

    pub fn rejected_signatures(&self) -> BTreeSet<PacketSignature> {
        self.chains.iter().flat_map(|c| c.rejected_signatures()).collect()
    }
}

/// Accepts a run directory (with `chains/` and optionally `events.jsonl`)
/// or a bare chain export directory.
pub fn audit(dir: &Path, confirmations: u64, adoption_margin: u64) -> Result<AuditReport, AuditError> {
    let (chains_dir, events_path) = if dir.join(CHAINS_DIR).is_dir() {
        (dir.join(CHAINS_DIR), Some(dir.join(EVENTS_FILE)))
    } else if dir.join(crate::ledger::export::CONTROL_FILE).is_file() {
        (dir.to_path_buf(), None)
    } else {
        return Err(AuditError::NotAnExport(dir.to_path_buf()));
    };
    let (archive, file_errors) = BlockArchive::read_dir(&chains_dir)?;
    let mut errors: Vec<String> = file_errors.iter().map(|e| e.to_string()).collect();
    let events = events_path.filter(|p| p.is_file()).map(|p| read_events(&p, &mut errors));
    let mut report = audit_archive(&archive, confirmations, adoption_margin, events.as_deref());
    report.errors.extend(errors);
    Ok(report)
}

fn read_events(path: &Path, errors: &mut Vec<String>) -> Vec<LogLine> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) => {
            errors.push(format!("{}: {e}", path.display()));
            return Vec::new();
        }
    };
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        match line.map_err(|e| e.to_string()).and_then(|l| serde_json::from_str(&l).map_err(|e| e.to_string())) {
            Ok(ev) => out.push(ev),
            Err(e) => errors.push(format!("{}:{}: {e}", path.display(), i + 1)),
        }
    }
    out
}

pub fn audit_archive(archive: &BlockArchive, confirmations: u64, adoption_margin: u64, events: Option<&[LogLine]>) -> AuditReport {
    let view = LedgerView::from_archive(archive, detect_mode(archive), confirmations, adoption_margin);
    let curves = events.map(adoption_curves).unwrap_or_default();
    let mut chains = Vec::new();
    for chain in view.chains() {
        let tree = view.store.device_tree(&chain).expect("listed chain");
        let branch = view.canonical_branch(&chain);
        let tip_height = branch.last().map_or(0, |n| n.height);
        let forks = view.forks(&chain);
        let (rejected, stale): (Vec<_>, Vec<_>) = forks.into_iter().partition(|f| !f.anomalous.is_empty());

        let mut first_seen: BTreeMap<PacketSignature, f64> = BTreeMap::new();
        for node in tree.iter() {
            let t = node.block.timestamp.as_secs_f64();
            for s in &node.block.signatures {
                let e = first_seen.entry(*s).or_insert(t);
                *e = e.min(t);
            }
        }
        let origins = view.signature_origins(&chain);
        let signatures = first_seen
            .into_iter()
            .map(|(signature, first_seen)| {
                let origin = origins.get(&signature);
                let confirmed = origin.and_then(|(h, _)| {
                    let at = h + confirmations;
                    (at <= tip_height).then(|| branch[at as usize].block.timestamp.as_secs_f64())
                });
                SignatureTimeline {
                    signature,
                    first_seen,
                    canonical: origin.is_some(),
                    included: origin.map(|(_, t)| t.as_secs_f64()),
                    confirmed,
                }
            })
            .collect();

        let miners: BTreeSet<SentinelAddress> = branch.iter().skip(1).map(|n| n.block.sentinel_address).collect();
        chains.push(ChainAudit {
            chain_id: chain,
            blocks: tree.len(),
            canonical_height: tip_height,
            whitelist: view.whitelist(&chain).into_iter().collect(),
            confirmed_whitelist: view.confirmed_whitelist(&chain).into_iter().collect(),
            unconfirmed: view.unconfirmed_signatures(&chain).into_iter().collect(),
            rejected_forks: rejected,
            stale_branches: stale.len(),
            signatures,
            single_authority: if miners.len() == 1 { miners.into_iter().next() } else { None },
            adoption: curves.get(&chain).cloned().unwrap_or_default(),
        });
    }
    AuditReport {
        control_blocks: archive.control.len(),
        control_height: view.store.control_height(),
        skipped_blocks: view.skipped,
        confirmations,
        chains,
        errors: Vec::new(),
    }
}

/// Per chain and signature: the share of subscribers that have observed
/// it and the share enforcing it, after each change.
pub fn adoption_curves(events: &[LogLine]) -> BTreeMap<ChainId, Vec<AdoptionCurve>> {
    let mut subscribers: BTreeMap<ChainId, BTreeSet<PeerId>> = BTreeMap::new();
    for line in events {
        if let SentinelEvent::Subscribed { chain, .. } = &line.event {
            subscribers.entry(*chain).or_default().insert(line.node);
        }
    }
    type Key = (ChainId, PacketSignature);
    let mut observed: BTreeMap<Key, BTreeSet<PeerId>> = BTreeMap::new();
    let mut enforced: BTreeMap<Key, BTreeSet<PeerId>> = BTreeMap::new();
    let mut curves: BTreeMap<Key, AdoptionCurve> = BTreeMap::new();
    for line in events {
        let mut touched = Vec::new();
        match &line.event {
            SentinelEvent::SignatureObserved { chain, signature, .. } => {
                if observed.entry((*chain, *signature)).or_default().insert(line.node) {
                    touched.push((*chain, *signature));
                }
            }
            SentinelEvent::WhitelistChanged { chain, added, removed } => {
                for s in added {
                    enforced.entry((*chain, *s)).or_default().insert(line.node);
                    touched.push((*chain, *s));
                }
                for s in removed {
                    enforced.entry((*chain, *s)).or_default().remove(&line.node);
                    touched.push((*chain, *s));
                }
            }
            _ => {}
        }
        for key in touched {
            let n = subscribers.get(&key.0).map_or(0, |s| s.len()).max(1);
            let obs = observed.get(&key).map_or(0, |s| s.len()) as f64 / n as f64;
            let wl = enforced.get(&key).map_or(0, |s| s.len()) as f64 / n as f64;
            let time = line.time.as_secs_f64();
            let curve = curves.entry(key).or_insert_with(|| AdoptionCurve {
                signature: key.1,
                subscribers: n,
                points: Vec::new(),
                observed_majority_at: None,
                whitelisted_majority_at: None,
            });
            curve.points.push(AdoptionPoint { time, observed: obs, whitelisted: wl });
            if obs > 0.5 && curve.observed_majority_at.is_none() {
                curve.observed_majority_at = Some(time);
            }
            if wl > 0.5 && curve.whitelisted_majority_at.is_none() {
                curve.whitelisted_majority_at = Some(time);
            }
        }
    }
    let mut out: BTreeMap<ChainId, Vec<AdoptionCurve>> = BTreeMap::new();
    for ((chain, _), curve) in curves {
        out.entry(chain).or_default().push(curve);
    }
    out
}
