use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::digest::{BlockHash, ChainId, PacketSignature, SentinelAddress};
use crate::ledger::{
    is_self_certified_genesis, validate_control_block, whitelist_at, BlockArchive, ChainStore, ControlBlock, PowMode, Target, TreeNode,
    WhitelistBlock,
};
use crate::time::SimTime;

/// Branch of a device chain that hangs off the canonical path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForkInfo {
    pub chain_id: ChainId,
    /// Canonical block the branch grows from.
    pub parent: Option<BlockHash>,
    pub fork_height: u64,
    pub blocks: Vec<BlockHash>,
    /// Longest path inside the branch.
    pub length: u64,
    pub miners: BTreeSet<SentinelAddress>,
    pub signatures: BTreeSet<PacketSignature>,
    /// Signatures absent from the confirmed canonical whitelist.
    pub anomalous: BTreeSet<PacketSignature>,
    pub first_time: SimTime,
    pub last_time: SimTime,
}

/// Network-wide replay of an archive. The control chain is the longest one;
/// each device chain follows the branch a sentinel with no local traffic
/// would pick: the longest anchored branch made of signatures it already
/// accepted, unless another anchored branch leads it by the adoption margin.
#[derive(Debug, Clone)]
pub struct LedgerView {
    pub store: ChainStore,
    /// Blocks that failed validation or insertion during replay.
    pub skipped: usize,
    confirmations: u64,
    tips: BTreeMap<ChainId, BlockHash>,
}

impl LedgerView {
    /// `confirmations` sets which canonical prefix counts as settled when
    /// labelling signatures anomalous.
    pub fn from_archive(archive: &BlockArchive, mode: PowMode, confirmations: u64, adoption_margin: u64) -> Self {
        let target = archive.control.iter().find(|b| !b.is_genesis()).map_or(Target::MAX, |b| b.target);
        let mut store = ChainStore::new(target);
        let mut skipped = 0;
        for block in archive.control.iter().filter(|b| !b.is_genesis()) {
            if !validate_control_block(block, &store, mode).is_valid() || store.insert_control(block.clone()).is_err() {
                skipped += 1;
            }
        }
        for blocks in archive.devices.values() {
            for block in blocks {
                if store.insert_whitelist(block.clone()).is_err() {
                    skipped += 1;
                }
            }
        }
        let tips = store
            .chains()
            .filter_map(|c| Some((*c, passive_tip(&store, c, adoption_margin)?)))
            .collect();
        LedgerView { store, skipped, confirmations, tips }
    }

    pub fn chains(&self) -> Vec<ChainId> {
        self.store.chains().copied().collect()
    }

    /// Longest control chain, genesis first.
    pub fn canonical_control(&self) -> Vec<&TreeNode<ControlBlock>> {
        let mut path: Vec<_> = self.store.control().ancestry(&self.store.control_tip()).collect();
        path.reverse();
        path
    }

    /// Overrides the canonical branch of a chain; ignored for unknown blocks.
    pub fn set_tip(&mut self, chain: &ChainId, tip: BlockHash) {
        if self.store.contains_whitelist(chain, &tip) {
            self.tips.insert(*chain, tip);
        }
    }

    pub fn canonical_tip(&self, chain: &ChainId) -> Option<BlockHash> {
        self.tips.get(chain).copied()
    }

    /// Canonical branch of a device chain, genesis first.
    pub fn canonical_branch(&self, chain: &ChainId) -> Vec<&TreeNode<WhitelistBlock>> {
        let (Some(tree), Some(tip)) = (self.store.device_tree(chain), self.canonical_tip(chain)) else {
            return Vec::new();
        };
        let mut path: Vec<_> = tree.ancestry(&tip).collect();
        path.reverse();
        path
    }

    pub fn whitelist(&self, chain: &ChainId) -> BTreeSet<PacketSignature> {
        match (self.store.device_tree(chain), self.canonical_tip(chain)) {
            (Some(tree), Some(tip)) => whitelist_at(tree, &tip),
            _ => BTreeSet::new(),
        }
    }

    /// Whitelist of the canonical branch without its newest blocks.
    pub fn confirmed_whitelist(&self, chain: &ChainId) -> BTreeSet<PacketSignature> {
        let (Some(tree), Some(tip)) = (self.store.device_tree(chain), self.canonical_tip(chain)) else {
            return BTreeSet::new();
        };
        let base = tree.ancestor_at_depth(&tip, self.confirmations).unwrap_or_else(|| {
            tree.ancestry(&tip).last().map(|n| n.hash).expect("tip is in the tree")
        });
        whitelist_at(tree, &base)
    }

    /// Canonical blocks above the confirmed point that carry signatures the
    /// confirmed whitelist lacks.
    pub fn unconfirmed_signatures(&self, chain: &ChainId) -> BTreeSet<PacketSignature> {
        let confirmed = self.confirmed_whitelist(chain);
        self.whitelist(chain).difference(&confirmed).copied().collect()
    }

    /// Every maximal subtree off the canonical branch.
    pub fn forks(&self, chain: &ChainId) -> Vec<ForkInfo> {
        let Some(tree) = self.store.device_tree(chain) else { return Vec::new() };
        let canonical: HashSet<BlockHash> = self.canonical_branch(chain).iter().map(|n| n.hash).collect();
        let confirmed = self.confirmed_whitelist(chain);
        let mut out = Vec::new();
        for node in tree.iter() {
            if canonical.contains(&node.hash) {
                continue;
            }
            let root_of_fork = match node.parent {
                None => true,
                Some(p) => canonical.contains(&p),
            };
            if !root_of_fork {
                continue;
            }
            let mut fork = ForkInfo {
                chain_id: *chain,
                parent: node.parent,
                fork_height: node.height,
                blocks: Vec::new(),
                length: 0,
                miners: BTreeSet::new(),
                signatures: BTreeSet::new(),
                anomalous: BTreeSet::new(),
                first_time: node.block.timestamp,
                last_time: node.block.timestamp,
            };
            let mut stack = vec![node.hash];
            while let Some(h) = stack.pop() {
                let n = tree.get(&h).expect("child is in the tree");
                fork.blocks.push(h);
                fork.length = fork.length.max(n.height - node.height + 1);
                fork.miners.insert(n.block.sentinel_address);
                fork.signatures.extend(n.block.signatures.iter().copied());
                fork.first_time = fork.first_time.min(n.block.timestamp);
                fork.last_time = fork.last_time.max(n.block.timestamp);
                stack.extend(n.children.iter().copied());
            }
            fork.blocks.sort();
            fork.anomalous = fork.signatures.difference(&confirmed).copied().collect();
            out.push(fork);
        }
        out
    }

    /// First canonical block listing each signature.
    pub fn signature_origins(&self, chain: &ChainId) -> BTreeMap<PacketSignature, (u64, SimTime)> {
        let mut out = BTreeMap::new();
        for node in self.canonical_branch(chain) {
            for s in &node.block.signatures {
                out.entry(*s).or_insert((node.height, node.block.timestamp));
            }
        }
        out
    }
}

/// Real hashing leaves non-maximal targets in the control blocks.
pub fn detect_mode(archive: &BlockArchive) -> PowMode {
    match archive.control.iter().find(|b| !b.is_genesis()) {
        Some(b) if b.target != Target::MAX => PowMode::RealPow,
        _ => PowMode::Simulated,
    }
}

type Rank = (u64, u64, BlockHash);

/// Replays the sentinel fork choice over the blocks in archive order, with
/// anchoring taken from the final control chain.
fn passive_tip(store: &ChainStore, chain: &ChainId, margin: u64) -> Option<BlockHash> {
    let tree = store.device_tree(chain)?;
    let nodes: Vec<&TreeNode<WhitelistBlock>> = tree.iter().collect();
    let mut adopted: HashSet<PacketSignature> = nodes
        .iter()
        .filter(|n| n.parent.is_none() && is_self_certified_genesis(&n.block))
        .flat_map(|n| n.block.signatures.iter().copied())
        .collect();
    let mut anchored: HashMap<BlockHash, bool> = HashMap::with_capacity(nodes.len());
    let mut recognized: HashMap<BlockHash, bool> = HashMap::with_capacity(nodes.len());
    let mut best_any: Option<Rank> = None;
    let mut best_rec: Option<Rank> = None;
    let mut tip = None;
    let better = |cur: &Option<Rank>, n: &TreeNode<WhitelistBlock>| cur.is_none_or(|(h, r, _)| n.height > h || (n.height == h && n.receipt < r));

    for i in 0..nodes.len() {
        let node = nodes[i];
        let (pa, pr) = match node.parent {
            Some(p) => (anchored[&p], recognized[&p]),
            None => (true, true),
        };
        let a = pa && store.is_anchored(&node.block, &node.hash);
        let r = pr && node.block.signatures.iter().all(|s| adopted.contains(s));
        anchored.insert(node.hash, a);
        recognized.insert(node.hash, r);
        if a && better(&best_any, node) {
            best_any = Some((node.height, node.receipt, node.hash));
        }
        if a && r && better(&best_rec, node) {
            best_rec = Some((node.height, node.receipt, node.hash));
        }
        let adopt = match (best_rec, best_any) {
            (Some(r), Some(a)) if a.0 >= r.0 + margin => Some(a.2),
            (Some(r), _) => {
                tip = Some(r.2);
                None
            }
            (None, Some(a)) if a.0 + 1 >= margin => Some(a.2),
            _ => None,
        };
        if let Some(t) = adopt {
            tip = Some(t);
            adopted.extend(tree.ancestry(&t).flat_map(|n| n.block.signatures.iter().copied()));
            best_rec = None;
            for n in &nodes[..=i] {
                let pr = n.parent.is_none_or(|p| recognized[&p]);
                let r = pr && n.block.signatures.iter().all(|s| adopted.contains(s));
                recognized.insert(n.hash, r);
                if r && anchored[&n.hash] && better(&best_rec, n) {
                    best_rec = Some((n.height, n.receipt, n.hash));
                }
            }
        }
    }
    tip
}
