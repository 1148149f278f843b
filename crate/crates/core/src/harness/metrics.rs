use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::view::LedgerView;
use super::world::{DeviceTally, World};
use crate::devsim::AttackKind;
use crate::digest::{BlockHash, ChainId, PacketSignature, SentinelAddress};
use crate::ledger::PowMode;
use crate::netsim::NetStats;
use crate::sentinel::PeerId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlMetrics {
    pub canonical_height: u64,
    pub blocks_mined: u64,
    /// Mined control blocks that ended off the longest chain.
    pub stale_blocks: u64,
    pub first_block_time: Option<f64>,
    pub last_block_time: Option<f64>,
    /// Mean spacing of canonical blocks after the first.
    pub mean_interval: Option<f64>,
    pub rejected_announcements: u64,
    pub shares_found: u64,
    pub reorgs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMetrics {
    pub chain_id: ChainId,
    pub labels: Vec<String>,
    pub subscribers: usize,
    /// Latest whitelist change anywhere; only set when all subscribers agree.
    pub convergence_time: Option<f64>,
    pub whitelists_agree: bool,
    pub final_whitelist_size: usize,
    pub canonical_height: u64,
    pub canonical_whitelist_size: usize,
    pub forks_created: usize,
    /// Forks carrying signatures outside the confirmed canonical whitelist.
    pub forks_rejected: usize,
    /// Distinct confirmed tips across subscribers, minus one.
    pub persistent_forks: usize,
    pub rejected_blocks: u64,
    pub adoptions: u64,
    pub last_growth_time: Option<f64>,
    /// Canonical blocks in the final tenth of the branch that add signatures.
    pub tail_growth_blocks: usize,
    pub attack_admitted: bool,
    pub admitted_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetrics {
    pub device: String,
    pub label: String,
    pub chain_id: Option<ChainId>,
    pub infected: bool,
    #[serde(flatten)]
    pub tally: DeviceTally,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: PeerId,
    pub address: SentinelAddress,
    pub infected: bool,
    pub forwarded: u64,
    pub dropped: u64,
    pub profile_passed: u64,
    pub blocks_mined: u64,
    pub devices: Vec<DeviceMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    /// "control" or a device chain id.
    pub chain: String,
    pub bucket_start: f64,
    pub blocks: u64,
    pub bytes: u64,
    pub mean_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub kind: AttackKind,
    pub fraction: f64,
    pub infected_devices: Vec<String>,
    pub infected_nodes: Vec<PeerId>,
    pub signatures: Vec<PacketSignature>,
    pub admitted: bool,
    pub admitted_fraction: f64,
    /// (node, signature) pairs that were enforced at any point.
    pub ever_enforced: usize,
    pub ever_enforced_by_uninfected: usize,
    /// Legitimate packets of infected devices dropped while enforcing.
    pub infected_legit_dropped: u64,
    pub infected_legit_forwarded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub sentinels: usize,
    pub duration: f64,
    pub block_interval: f64,
    pub pow_mode: PowMode,
    pub events_processed: u64,
    pub messages: BTreeMap<String, u64>,
    pub network: NetStats,
    pub sync_gave_up: u64,
    pub control: ControlMetrics,
    pub chains: Vec<ChainMetrics>,
    pub nodes: Vec<NodeMetrics>,
    pub growth: Vec<GrowthRow>,
    pub attack: Option<AttackMetrics>,
}

impl MetricsReport {
    pub fn chain_by_label(&self, label: &str) -> Option<&ChainMetrics> {
        self.chains.iter().find(|c| c.labels.iter().any(|l| l == label))
    }

    pub fn admitted(&self) -> bool {
        self.attack.as_ref().is_some_and(|a| a.admitted)
    }
}

fn secs(t: crate::time::SimTime) -> f64 {
    t.as_secs_f64()
}

pub(crate) fn build_report(world: &World, events_processed: u64) -> MetricsReport {
    let cfg = &world.cfg;
    let mut view = LedgerView::from_archive(&world.archive, cfg.pow.mode, cfg.protocol.confirmations, cfg.protocol.adoption_margin);
    // run metrics follow the branch most subscribers sit on
    for chain in view.chains() {
        let mut votes: BTreeMap<BlockHash, usize> = BTreeMap::new();
        for node in &world.nodes {
            if let Some(tip) = node.chosen_tip(&chain) {
                *votes.entry(tip).or_default() += 1;
            }
        }
        if let Some((tip, _)) = votes.into_iter().max_by_key(|(h, n)| (*n, std::cmp::Reverse(*h))) {
            view.set_tip(&chain, tip);
        }
    }
    let infected_nodes = world.device_infected_nodes();
    let collector = &world.collector;

    let canonical = view.canonical_control();
    let canonical_height = canonical.last().map_or(0, |n| n.height);
    let blocks_mined: u64 = collector.mined.iter().sum();
    let mined_times: Vec<f64> = canonical.iter().skip(1).map(|n| secs(n.block.timestamp)).collect();
    let mean_interval = match (mined_times.first(), mined_times.last()) {
        (Some(a), Some(b)) if mined_times.len() > 1 => Some((b - a) / (mined_times.len() - 1) as f64),
        _ => None,
    };
    let control = ControlMetrics {
        canonical_height,
        blocks_mined,
        stale_blocks: blocks_mined.saturating_sub(canonical_height),
        first_block_time: mined_times.first().copied(),
        last_block_time: mined_times.last().copied(),
        mean_interval,
        rejected_announcements: collector.control_rejected,
        shares_found: collector.shares_found,
        reorgs: collector.reorgs,
    };

    let mut chains = Vec::new();
    let mut any_admitted = false;
    let mut max_admitted_fraction: f64 = 0.0;
    let attack_sigs = &world.attack_sigs;
    for chain in view.chains() {
        let subscribers: Vec<PeerId> = (0..world.nodes.len()).filter(|&i| world.nodes[i].chains().contains(&chain)).collect();
        let enforced: Vec<BTreeSet<PacketSignature>> = subscribers
            .iter()
            .map(|&i| world.nodes[i].enforced_whitelist(&chain).cloned().unwrap_or_default())
            .collect();
        let agree = enforced.windows(2).all(|w| w[0] == w[1]);
        let confirmed_tips: BTreeSet<_> = subscribers
            .iter()
            .filter_map(|&i| {
                let tip = world.nodes[i].chosen_tip(&chain)?;
                let tree = world.nodes[i].store().device_tree(&chain)?;
                Some(tree.ancestor_at_depth(&tip, cfg.protocol.confirmations).unwrap_or(tip))
            })
            .collect();

        let chain_attack: BTreeSet<PacketSignature> = world
            .infections
            .iter()
            .filter(|inf| {
                let d = &world.devices[inf.device];
                world.nodes[d.node].subscriptions().get(&d.id) == Some(&chain)
            })
            .map(|inf| world.devices[inf.device].attack.expect("infected"))
            .collect();
        let mut uninfected: Vec<usize> = Vec::new();
        for (k, &i) in subscribers.iter().enumerate() {
            let infected_here = world.infections.iter().any(|inf| {
                let d = &world.devices[inf.device];
                d.node == i && world.nodes[i].subscriptions().get(&d.id) == Some(&chain)
            });
            if !infected_here {
                uninfected.push(k);
            }
        }
        let judges: Vec<usize> = if uninfected.is_empty() { (0..subscribers.len()).collect() } else { uninfected };
        let mut admitted = false;
        let mut admitted_fraction: f64 = 0.0;
        for s in &chain_attack {
            if !judges.is_empty() && judges.iter().all(|&k| enforced[k].contains(s)) {
                admitted = true;
            }
            let holders = enforced.iter().filter(|w| w.contains(s)).count();
            if !subscribers.is_empty() {
                admitted_fraction = admitted_fraction.max(holders as f64 / subscribers.len() as f64);
            }
        }
        any_admitted |= admitted;
        max_admitted_fraction = max_admitted_fraction.max(admitted_fraction);

        let branch = view.canonical_branch(&chain);
        let growing: Vec<_> = branch.iter().skip(1).filter(|n| !n.block.signatures.is_empty()).collect();
        let tail_start = branch.len() - branch.len().div_ceil(10);
        let tail_growth_blocks = branch[tail_start..].iter().filter(|n| n.height > 0 && !n.block.signatures.is_empty()).count();
        let forks = view.forks(&chain);

        chains.push(ChainMetrics {
            chain_id: chain,
            labels: collector.chain_labels.get(&chain).map(|l| l.iter().cloned().collect()).unwrap_or_default(),
            subscribers: subscribers.len(),
            convergence_time: agree.then(|| collector.last_whitelist_change.get(&chain).map_or(0.0, |t| secs(*t))),
            whitelists_agree: agree,
            final_whitelist_size: enforced.iter().map(|w| w.len()).max().unwrap_or(0),
            canonical_height: branch.last().map_or(0, |n| n.height),
            canonical_whitelist_size: view.whitelist(&chain).len(),
            forks_created: forks.len(),
            forks_rejected: forks.iter().filter(|f| !f.anomalous.is_empty()).count(),
            persistent_forks: confirmed_tips.len().saturating_sub(1),
            rejected_blocks: collector.blocks_rejected.get(&chain).copied().unwrap_or(0),
            adoptions: collector.adoptions.get(&chain).copied().unwrap_or(0),
            last_growth_time: growing.last().map(|n| secs(n.block.timestamp)),
            tail_growth_blocks,
            attack_admitted: admitted,
            admitted_fraction,
        });
    }

    let nodes = world
        .nodes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let devices: Vec<DeviceMetrics> = world
                .devices
                .iter()
                .filter(|d| d.node == i)
                .map(|d| DeviceMetrics {
                    device: d.id.clone(),
                    label: d.label.clone(),
                    chain_id: s.subscriptions().get(&d.id).copied(),
                    infected: d.attack.is_some(),
                    tally: d.tally,
                })
                .collect();
            let sum = |f: fn(&DeviceTally) -> u64| devices.iter().map(|d| f(&d.tally)).sum::<u64>();
            NodeMetrics {
                node: i,
                address: s.address(),
                infected: infected_nodes.contains(&i),
                forwarded: sum(|t| t.legit_forwarded + t.attack_forwarded),
                dropped: sum(|t| t.legit_dropped + t.attack_dropped),
                profile_passed: sum(|t| t.profile_passed),
                blocks_mined: collector.mined.get(i).copied().unwrap_or(0),
                devices,
            }
        })
        .collect();

    let attack = cfg.attack.as_ref().map(|a| {
        let infected: Vec<_> = world.infections.iter().map(|inf| &world.devices[inf.device]).collect();
        AttackMetrics {
            kind: a.kind,
            fraction: a.fraction,
            infected_devices: infected.iter().map(|d| d.id.clone()).collect(),
            infected_nodes: infected_nodes.iter().copied().collect(),
            signatures: attack_sigs.iter().copied().collect(),
            admitted: any_admitted,
            admitted_fraction: max_admitted_fraction,
            ever_enforced: collector.attack_enforced.len(),
            ever_enforced_by_uninfected: collector.attack_enforced.keys().filter(|(n, _)| !infected_nodes.contains(n)).count(),
            infected_legit_dropped: infected.iter().map(|d| d.tally.legit_dropped).sum(),
            infected_legit_forwarded: infected.iter().map(|d| d.tally.legit_forwarded).sum(),
        }
    });

    MetricsReport {
        seed: world.seed,
        sentinels: cfg.sentinels,
        duration: cfg.duration,
        block_interval: cfg.block_interval,
        pow_mode: cfg.pow.mode,
        events_processed,
        messages: world.messages.clone(),
        network: world.net.stats(),
        sync_gave_up: collector.sync_gave_up,
        control,
        chains,
        nodes,
        growth: growth_rows(&view, cfg.growth_bucket),
        attack,
    }
}

/// Canonical blocks and encoded bytes per chain per time bucket.
pub fn growth_rows(view: &LedgerView, bucket: f64) -> Vec<GrowthRow> {
    let mut rows = Vec::new();
    let mut push = |chain: String, items: Vec<(f64, usize)>| {
        let mut buckets: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
        for (t, size) in items {
            let e = buckets.entry((t / bucket).floor() as u64).or_default();
            e.0 += 1;
            e.1 += size as u64;
        }
        for (b, (blocks, bytes)) in buckets {
            rows.push(GrowthRow {
                chain: chain.clone(),
                bucket_start: b as f64 * bucket,
                blocks,
                bytes,
                mean_size: bytes as f64 / blocks as f64,
            });
        }
    };
    push(
        "control".to_string(),
        view.canonical_control().iter().skip(1).map(|n| (secs(n.block.timestamp), n.block.encoded_len())).collect(),
    );
    for chain in view.chains() {
        let items = view.canonical_branch(&chain).iter().map(|n| (secs(n.block.timestamp), n.block.encoded_len())).collect();
        push(chain.to_hex(), items);
    }
    rows
}
