use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::block::{ControlBlock, Target, WhitelistBlock};
use super::tree::{BlockTree, InsertError};
use crate::digest::{BlockHash, ChainId, PacketSignature};
use crate::sigcore::compute_fingerprint;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LedgerError {
    #[error("unknown device chain {0:?}")]
    UnknownChain(ChainId),
    #[error("device chain {0:?} has no anchored block yet")]
    NoAnchoredBlock(ChainId),
    #[error(transparent)]
    Insert(#[from] InsertError),
}

/// How control-block proof of work is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowMode {
    /// Hash must fall below the target.
    RealPow,
    /// The simulator's scheduler stands in for the puzzle race; no threshold check.
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Parent block is not stored.
    Orphan,
    /// A signature (or header) appears twice in the block.
    Duplicate,
    /// Control hash does not meet the target.
    Pow,
    /// Block claims a different difficulty than the network runs at.
    TargetMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Validity {
    Valid,
    /// Structurally sound, waiting for a control block to list its header.
    Pending,
    Invalid(Vec<RejectReason>),
}

impl Validity {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validity::Valid)
    }
}

/// Result of adding a control block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlUpdate {
    pub hash: BlockHash,
    pub tip_changed: bool,
    /// The new tip does not descend from the previous one.
    pub reorg: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Whitelist {
    pub chain_id: ChainId,
    pub allowed: BTreeSet<PacketSignature>,
}

/// One sentinel's view of the control chain and its subscribed device chains.
#[derive(Debug, Clone)]
pub struct ChainStore {
    control: BlockTree<ControlBlock>,
    control_tip: BlockHash,
    devices: BTreeMap<ChainId, BlockTree<WhitelistBlock>>,
    /// Whitelist headers listed by control blocks on the longest control chain.
    confirmed_headers: HashSet<BlockHash>,
    expected_target: Target,
    receipt: u64,
}

impl Default for ChainStore {
    fn default() -> Self {
        Self::new(Target::MAX)
    }
}

impl ChainStore {
    pub fn new(expected_target: Target) -> Self {
        let mut control = BlockTree::new();
        let genesis = ControlBlock::genesis();
        let control_tip = control.insert(genesis, 0).expect("empty tree").hash;
        ChainStore {
            control,
            control_tip,
            devices: BTreeMap::new(),
            confirmed_headers: HashSet::new(),
            expected_target,
            receipt: 0,
        }
    }

    pub fn expected_target(&self) -> Target {
        self.expected_target
    }

    fn next_receipt(&mut self) -> u64 {
        self.receipt += 1;
        self.receipt
    }

    pub fn control(&self) -> &BlockTree<ControlBlock> {
        &self.control
    }

    pub fn control_tip(&self) -> BlockHash {
        self.control_tip
    }

    pub fn control_height(&self) -> u64 {
        self.control.get(&self.control_tip).map(|n| n.height).unwrap_or(0)
    }

    pub fn device_tree(&self, chain_id: &ChainId) -> Option<&BlockTree<WhitelistBlock>> {
        self.devices.get(chain_id)
    }

    pub fn chains(&self) -> impl Iterator<Item = &ChainId> {
        self.devices.keys()
    }

    pub fn has_chain(&self, chain_id: &ChainId) -> bool {
        self.devices.contains_key(chain_id)
    }

    pub fn is_header_confirmed(&self, header: &BlockHash) -> bool {
        self.confirmed_headers.contains(header)
    }

    pub fn contains_control(&self, hash: &BlockHash) -> bool {
        self.control.contains(hash)
    }

    pub fn contains_whitelist(&self, chain_id: &ChainId, hash: &BlockHash) -> bool {
        self.devices.get(chain_id).is_some_and(|t| t.contains(hash))
    }

    /// Stores a control block and moves the control tip if it is now the
    /// longest. Validation is the caller's job.
    pub fn insert_control(&mut self, block: ControlBlock) -> Result<ControlUpdate, LedgerError> {
        let receipt = self.next_receipt();
        let hash = self.control.insert(block, receipt)?.hash;
        let best = self.control.best_tip().expect("tree has genesis").hash;
        if best == self.control_tip {
            return Ok(ControlUpdate { hash, tip_changed: false, reorg: false });
        }
        let old = self.control_tip;
        let extends = self.control.is_ancestor(&old, &best);
        self.control_tip = best;
        if extends {
            let new_headers: Vec<BlockHash> = self
                .control
                .ancestry(&best)
                .take_while(|n| n.hash != old)
                .flat_map(|n| n.block.whitelist_headers.iter().copied())
                .collect();
            self.confirmed_headers.extend(new_headers);
        } else {
            self.rebuild_confirmed_headers();
        }
        Ok(ControlUpdate { hash, tip_changed: true, reorg: !extends })
    }

    fn rebuild_confirmed_headers(&mut self) {
        self.confirmed_headers = self
            .control
            .ancestry(&self.control_tip)
            .flat_map(|n| n.block.whitelist_headers.iter().copied())
            .collect();
    }

    /// Stores a whitelist block regardless of anchoring; fork choice only
    /// considers anchored paths.
    pub fn insert_whitelist(&mut self, block: WhitelistBlock) -> Result<BlockHash, LedgerError> {
        let receipt = self.next_receipt();
        let chain_id = block.chain_id;
        if !block.is_genesis() && !self.devices.contains_key(&chain_id) {
            return Err(InsertError::Orphan(block.prev_hash).into());
        }
        let tree = self.devices.entry(chain_id).or_default();
        Ok(tree.insert(block, receipt)?.hash)
    }

    /// Anchored: listed on the longest control chain, or a self-certifying
    /// genesis whose signatures fingerprint to the chain id.
    pub fn is_anchored(&self, block: &WhitelistBlock, hash: &BlockHash) -> bool {
        self.confirmed_headers.contains(hash) || is_self_certified_genesis(block)
    }

    /// Per-block flag: the block and every ancestor are anchored.
    pub fn anchored_paths(&self, chain_id: &ChainId) -> Result<HashMap<BlockHash, bool>, LedgerError> {
        let tree = self.devices.get(chain_id).ok_or(LedgerError::UnknownChain(*chain_id))?;
        Ok(tree.path_flags(|n| self.is_anchored(&n.block, &n.hash)))
    }

    /// Tip of the longest anchored branch; equal heights go to the block
    /// received first.
    pub fn resolve_fork(&self, chain_id: &ChainId) -> Result<BlockHash, LedgerError> {
        let flags = self.anchored_paths(chain_id)?;
        self.devices[chain_id]
            .best_where(|n| flags[&n.hash])
            .map(|n| n.hash)
            .ok_or(LedgerError::NoAnchoredBlock(*chain_id))
    }

    /// Union of all signatures from genesis to the chosen tip.
    pub fn derive_whitelist(&self, chain_id: &ChainId) -> Result<Whitelist, LedgerError> {
        let tip = self.resolve_fork(chain_id)?;
        let tree = &self.devices[chain_id];
        Ok(Whitelist { chain_id: *chain_id, allowed: whitelist_at(tree, &tip) })
    }

    /// Drops device-chain branches whose tip trails the longest tip by at
    /// least `depth` blocks.
    pub fn prune_rejected_forks(&mut self, chain_id: &ChainId, depth: u64) -> usize {
        self.prune_device_chain(chain_id, depth, &[])
    }

    pub fn prune_device_chain(&mut self, chain_id: &ChainId, depth: u64, protected: &[BlockHash]) -> usize {
        self.devices.get_mut(chain_id).map(|t| t.prune(depth, protected)).unwrap_or(0)
    }

    pub fn prune_control(&mut self, depth: u64) -> usize {
        let tip = self.control_tip;
        self.control.prune(depth, &[tip])
    }
}

pub fn is_self_certified_genesis(block: &WhitelistBlock) -> bool {
    block.is_genesis()
        && compute_fingerprint(&block.signatures).is_ok_and(|fp| fp == block.chain_id)
        && !block.has_duplicates()
}

/// Union of signatures along the path from `tip` back to its root.
pub fn whitelist_at(tree: &BlockTree<WhitelistBlock>, tip: &BlockHash) -> BTreeSet<PacketSignature> {
    tree.ancestry(tip).flat_map(|n| n.block.signatures.iter().copied()).collect()
}

pub fn validate_whitelist_block(block: &WhitelistBlock, store: &ChainStore) -> Validity {
    let mut reasons = Vec::new();
    if block.has_duplicates() {
        reasons.push(RejectReason::Duplicate);
    }
    if !block.is_genesis() && !store.contains_whitelist(&block.chain_id, &block.prev_hash) {
        reasons.push(RejectReason::Orphan);
    }
    if !reasons.is_empty() {
        return Validity::Invalid(reasons);
    }
    if store.is_anchored(block, &block.hash()) {
        Validity::Valid
    } else {
        Validity::Pending
    }
}

pub fn validate_control_block(block: &ControlBlock, store: &ChainStore, mode: PowMode) -> Validity {
    if block.is_genesis() {
        return Validity::Valid;
    }
    let mut reasons = Vec::new();
    if !store.contains_control(&block.prev_hash) {
        reasons.push(RejectReason::Orphan);
    }
    let distinct: HashSet<_> = block.whitelist_headers.iter().collect();
    if distinct.len() != block.whitelist_headers.len() {
        reasons.push(RejectReason::Duplicate);
    }
    if mode == PowMode::RealPow {
        if block.target != store.expected_target() {
            reasons.push(RejectReason::TargetMismatch);
        }
        if !block.target.is_met_by(&block.hash()) {
            reasons.push(RejectReason::Pow);
        }
    }
    if reasons.is_empty() {
        Validity::Valid
    } else {
        Validity::Invalid(reasons)
    }
}

/// Change between two derived whitelists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WhitelistDelta {
    pub added: Vec<PacketSignature>,
    pub removed: Vec<PacketSignature>,
}

impl WhitelistDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }
}

/// Incrementally maintained whitelist for a moving tip. Extending the tip
/// only walks the new blocks; any other move recomputes from genesis.
#[derive(Debug, Clone, Default)]
pub struct WhitelistCache {
    tip: Option<BlockHash>,
    allowed: BTreeSet<PacketSignature>,
}

impl WhitelistCache {
    pub fn tip(&self) -> Option<BlockHash> {
        self.tip
    }

    pub fn allowed(&self) -> &BTreeSet<PacketSignature> {
        &self.allowed
    }

    pub fn contains(&self, sig: &PacketSignature) -> bool {
        self.allowed.contains(sig)
    }

    pub fn update(&mut self, tree: &BlockTree<WhitelistBlock>, tip: BlockHash) -> WhitelistDelta {
        if self.tip == Some(tip) {
            return WhitelistDelta::default();
        }
        let extends = self.tip.is_some_and(|old| tree.is_ancestor(&old, &tip));
        let delta = if extends {
            let old = self.tip.expect("checked above");
            let mut added = Vec::new();
            for node in tree.ancestry(&tip).take_while(|n| n.hash != old) {
                for sig in &node.block.signatures {
                    if self.allowed.insert(*sig) {
                        added.push(*sig);
                    }
                }
            }
            added.sort();
            WhitelistDelta { added, removed: Vec::new() }
        } else {
            let fresh = whitelist_at(tree, &tip);
            let added = fresh.difference(&self.allowed).copied().collect();
            let removed = self.allowed.difference(&fresh).copied().collect();
            self.allowed = fresh;
            WhitelistDelta { added, removed }
        };
        self.tip = Some(tip);
        delta
    }
}
