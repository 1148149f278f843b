use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::message::{Action, FilterDecision, Message, PeerId, SentinelEvent, Timer, Verdict};
use crate::consensus::{ActivityLedger, MineOutcome, Miner, PowContext};
use crate::digest::{sha256, BlockHash, ChainId, PacketSignature, SentinelAddress};
use crate::ledger::{
    is_self_certified_genesis, validate_control_block, ChainStore, ControlBlock, PowMode, RejectReason, Target,
    Validity, WhitelistBlock, WhitelistCache,
};
use crate::sigcore::{compute_fingerprint, compute_signature, PacketRecord};
use crate::time::SimTime;

/// Blocks sent back for one missing-parent request.
const GET_BLOCKS_LIMIT: usize = 64;
/// Control blocks attached to a chain-sync response.
const SYNC_CONTROL_LIMIT: usize = 256;
/// Minimum gap before asking again for the same missing block.
const REREQUEST_AFTER: SimTime = SimTime(5_000_000);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SentinelError {
    #[error("device {0:?} is already connected")]
    DuplicateDevice(String),
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("no subscriptions to mine for")]
    NoSubscriptions,
    #[error("invalid sentinel config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SentinelConfig {
    pub profiling_duration: SimTime,
    /// Lead in blocks a branch with unrecognized signatures needs before it
    /// is adopted. 1 means "adopt as soon as strictly longer".
    pub adoption_margin: u64,
    /// Blocks below the chosen tip before their signatures are enforced.
    pub confirmations: u64,
    pub prune_depth: u64,
    /// Control insertions between pruning passes.
    pub prune_every: u64,
    pub activity_window: SimTime,
    pub sync_timeout: SimTime,
    pub sync_retries: u32,
    /// Re-broadcast accepted announcements (needed off a full mesh).
    pub relay: bool,
    pub log_decisions: bool,
    pub pow_mode: PowMode,
    pub target: Target,
    pub orphan_capacity: usize,
}

impl Default for SentinelConfig {
    fn default() -> Self {
        SentinelConfig {
            profiling_duration: SimTime::from_secs(60),
            adoption_margin: 24,
            confirmations: 6,
            prune_depth: 64,
            prune_every: 32,
            activity_window: SimTime::from_secs(200),
            sync_timeout: SimTime::from_secs(2),
            sync_retries: 3,
            relay: false,
            log_decisions: false,
            pow_mode: PowMode::Simulated,
            target: Target::MAX,
            orphan_capacity: 1024,
        }
    }
}

impl SentinelConfig {
    pub fn validate(&self) -> Result<(), SentinelError> {
        let bad = |m: &str| Err(SentinelError::Config(m.to_string()));
        if self.adoption_margin == 0 {
            return bad("adoption_margin must be at least 1");
        }
        if self.prune_depth <= self.adoption_margin + self.confirmations {
            return bad("prune_depth must exceed adoption_margin + confirmations");
        }
        if self.prune_every == 0 {
            return bad("prune_every must be at least 1");
        }
        if self.activity_window == SimTime::ZERO {
            return bad("activity_window must be positive");
        }
        Ok(())
    }
}

pub fn sentinel_address_new<R: Rng + ?Sized>(rng: &mut R) -> SentinelAddress {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    SentinelAddress(sha256(&seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Profiling { until: SimTime },
    Enforcing,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCounters {
    pub forwarded: u64,
    pub dropped: u64,
    pub profile_passed: u64,
}

#[derive(Debug, Clone)]
struct DeviceState {
    phase: Phase,
    profiled: BTreeSet<PacketSignature>,
    counters: DeviceCounters,
}

/// A sentinel's chosen branch on one device chain.
#[derive(Debug, Clone, Default)]
struct ChainView {
    tip: Option<BlockHash>,
    /// Tip of the longest recognized branch, kept safe from pruning.
    recognized_tip: Option<BlockHash>,
    full: WhitelistCache,
    confirmed: WhitelistCache,
}

/// One mining round: a control candidate and the whitelist blocks it lists.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundCandidates {
    pub control: ControlBlock,
    pub whitelist: Vec<WhitelistBlock>,
}

#[derive(Debug, Clone)]
enum Pending {
    Control(ControlBlock),
    Whitelist(WhitelistBlock),
}

/// Blocks waiting for their parent, keyed by the missing parent hash.
#[derive(Debug, Clone, Default)]
struct OrphanPool {
    by_parent: BTreeMap<BlockHash, Vec<Pending>>,
    order: VecDeque<BlockHash>,
    len: usize,
}

impl OrphanPool {
    fn add(&mut self, parent: BlockHash, item: Pending, capacity: usize) {
        self.by_parent.entry(parent).or_default().push(item);
        self.order.push_back(parent);
        self.len += 1;
        while self.len > capacity {
            let Some(old) = self.order.pop_front() else { break };
            if let Some(items) = self.by_parent.remove(&old) {
                self.len -= items.len();
            }
        }
    }

    fn take_children(&mut self, parent: &BlockHash) -> Vec<Pending> {
        let items = self.by_parent.remove(parent).unwrap_or_default();
        self.len -= items.len();
        items
    }
}

#[derive(Debug, Clone)]
struct SyncState {
    chain_id: ChainId,
    peer: PeerId,
    attempts: u32,
}

#[derive(Debug, Clone)]
struct MiningJob {
    round: RoundCandidates,
    miner: Miner,
}

#[derive(Debug, Clone)]
pub struct SentinelState {
    id: PeerId,
    address: SentinelAddress,
    peers: Vec<PeerId>,
    config: SentinelConfig,
    rng: ChaCha8Rng,
    subscriptions: BTreeMap<String, ChainId>,
    devices: BTreeMap<String, DeviceState>,
    observed: BTreeMap<ChainId, BTreeSet<PacketSignature>>,
    adopted: BTreeMap<ChainId, BTreeSet<PacketSignature>>,
    store: ChainStore,
    views: BTreeMap<ChainId, ChainView>,
    activity: ActivityLedger<PeerId>,
    orphans: OrphanPool,
    requested: BTreeMap<BlockHash, SimTime>,
    syncs: BTreeMap<u64, SyncState>,
    next_request: u64,
    control_inserts: u64,
    job: Option<MiningJob>,
    job_stale: bool,
}

impl SentinelState {
    pub fn new(id: PeerId, peers: Vec<PeerId>, config: SentinelConfig, mut rng: ChaCha8Rng) -> Self {
        let address = sentinel_address_new(&mut rng);
        let store = ChainStore::new(config.target);
        let activity = ActivityLedger::new(config.activity_window);
        SentinelState {
            id,
            address,
            peers,
            config,
            rng,
            subscriptions: BTreeMap::new(),
            devices: BTreeMap::new(),
            observed: BTreeMap::new(),
            adopted: BTreeMap::new(),
            store,
            views: BTreeMap::new(),
            activity,
            orphans: OrphanPool::default(),
            requested: BTreeMap::new(),
            syncs: BTreeMap::new(),
            next_request: 0,
            control_inserts: 0,
            job: None,
            job_stale: true,
        }
    }

    pub fn id(&self) -> PeerId {
        self.id
    }

    pub fn address(&self) -> SentinelAddress {
        self.address
    }

    pub fn peers(&self) -> &[PeerId] {
        &self.peers
    }

    pub fn config(&self) -> &SentinelConfig {
        &self.config
    }

    pub fn store(&self) -> &ChainStore {
        &self.store
    }

    pub fn subscriptions(&self) -> &BTreeMap<String, ChainId> {
        &self.subscriptions
    }

    /// Distinct subscribed chains.
    pub fn chains(&self) -> BTreeSet<ChainId> {
        self.subscriptions.values().copied().collect()
    }

    pub fn is_mining(&self) -> bool {
        !self.subscriptions.is_empty()
    }

    pub fn observed(&self, chain: &ChainId) -> Option<&BTreeSet<PacketSignature>> {
        self.observed.get(chain)
    }

    pub fn adopted(&self, chain: &ChainId) -> Option<&BTreeSet<PacketSignature>> {
        self.adopted.get(chain)
    }

    pub fn phase(&self, device: &str) -> Option<Phase> {
        self.devices.get(device).map(|d| d.phase)
    }

    pub fn counters(&self, device: &str) -> Option<DeviceCounters> {
        self.devices.get(device).map(|d| d.counters)
    }

    pub fn devices(&self) -> impl Iterator<Item = (&str, DeviceCounters)> {
        self.devices.iter().map(|(k, d)| (k.as_str(), d.counters))
    }

    pub fn chosen_tip(&self, chain: &ChainId) -> Option<BlockHash> {
        self.views.get(chain).and_then(|v| v.tip)
    }

    /// The whitelist this sentinel enforces: signatures confirmed on its
    /// chosen branch.
    pub fn enforced_whitelist(&self, chain: &ChainId) -> Option<&BTreeSet<PacketSignature>> {
        self.views.get(chain).map(|v| v.confirmed.allowed())
    }

    /// Everything on the chosen branch, confirmed or not.
    pub fn branch_whitelist(&self, chain: &ChainId) -> Option<&BTreeSet<PacketSignature>> {
        self.views.get(chain).map(|v| v.full.allowed())
    }

    pub fn is_peer_active(&self, peer: PeerId, now: SimTime) -> bool {
        self.activity.is_peer_active(&peer, now)
    }

    pub fn active_peers(&self, now: SimTime) -> Vec<PeerId> {
        self.peers.iter().copied().filter(|p| self.activity.is_peer_active(p, now)).collect()
    }

    fn log(&self, out: &mut Vec<Action>, event: SentinelEvent) {
        out.push(Action::Log(event));
    }

    fn is_recognized(&self, chain: &ChainId, sig: &PacketSignature) -> bool {
        self.observed.get(chain).is_some_and(|s| s.contains(sig)) || self.adopted.get(chain).is_some_and(|s| s.contains(sig))
    }

    // ---- devices and packets ----

    pub fn on_device_connected(&mut self, device: &str, now: SimTime, out: &mut Vec<Action>) -> Result<Phase, SentinelError> {
        if self.devices.contains_key(device) {
            return Err(SentinelError::DuplicateDevice(device.to_string()));
        }
        let until = now + self.config.profiling_duration;
        let phase = Phase::Profiling { until };
        self.devices.insert(
            device.to_string(),
            DeviceState { phase, profiled: BTreeSet::new(), counters: DeviceCounters::default() },
        );
        out.push(Action::SetTimer { at: until, timer: Timer::ProfilingDone { device: device.to_string() } });
        Ok(phase)
    }

    /// Closes the profiling window. A device that stayed silent keeps
    /// profiling until its first packet; `None` is returned then.
    pub fn finish_profiling(&mut self, device: &str, now: SimTime, out: &mut Vec<Action>) -> Result<Option<ChainId>, SentinelError> {
        let state = self.devices.get(device).ok_or_else(|| SentinelError::UnknownDevice(device.to_string()))?;
        match state.phase {
            Phase::Enforcing => return Ok(self.subscriptions.get(device).copied()),
            Phase::Profiling { until } if until > now => return Ok(None),
            Phase::Profiling { .. } => {}
        }
        let Ok(chain) = compute_fingerprint(&state.profiled) else {
            self.log(out, SentinelEvent::ProfilingHeld { device: device.to_string() });
            return Ok(None);
        };
        let profiled = state.profiled.clone();
        let first = self.subscriptions.is_empty();
        self.subscriptions.insert(device.to_string(), chain);
        self.observed.entry(chain).or_default().extend(profiled.iter().copied());
        self.devices.get_mut(device).expect("checked").phase = Phase::Enforcing;

        let created = !self.store.has_chain(&chain);
        if created {
            let genesis = WhitelistBlock::genesis(chain, profiled);
            self.store.insert_whitelist(genesis.clone()).expect("fresh chain accepts its genesis");
            out.push(Action::Genesis(genesis));
        }
        self.views.entry(chain).or_default();
        self.log(out, SentinelEvent::Subscribed { device: device.to_string(), chain, created });
        if created {
            self.start_sync(chain, now, out);
        }
        self.refresh_chain(&chain, out);
        if first {
            out.push(Action::StartMining);
        }
        Ok(Some(chain))
    }

    pub fn on_packet(&mut self, device: &str, record: &PacketRecord, now: SimTime, out: &mut Vec<Action>) -> Result<FilterDecision, SentinelError> {
        let sig = compute_signature(record).map_err(|_| SentinelError::UnknownDevice(device.to_string()))?;
        self.on_signature(device, sig, now, out)
    }

    /// Filtering on a precomputed signature.
    pub fn on_signature(&mut self, device: &str, sig: PacketSignature, now: SimTime, out: &mut Vec<Action>) -> Result<FilterDecision, SentinelError> {
        let state = self.devices.get_mut(device).ok_or_else(|| SentinelError::UnknownDevice(device.to_string()))?;
        let decision = match state.phase {
            Phase::Profiling { until } => {
                state.profiled.insert(sig);
                state.counters.profile_passed += 1;
                if until <= now {
                    self.finish_profiling(device, now, out)?;
                }
                FilterDecision { verdict: Verdict::ProfilePass, signature: sig, reason: "profiling" }
            }
            Phase::Enforcing => {
                let chain = self.subscriptions[device];
                let allowed = self.views.get(&chain).is_some_and(|v| v.confirmed.contains(&sig));
                let state = self.devices.get_mut(device).expect("present");
                if allowed {
                    state.counters.forwarded += 1;
                    FilterDecision { verdict: Verdict::Forward, signature: sig, reason: "whitelisted" }
                } else {
                    state.counters.dropped += 1;
                    if self.observed.entry(chain).or_default().insert(sig) {
                        self.job_stale = true;
                        self.log(out, SentinelEvent::SignatureObserved { device: device.to_string(), chain, signature: sig });
                    }
                    FilterDecision { verdict: Verdict::Drop, signature: sig, reason: "not in confirmed whitelist" }
                }
            }
        };
        if self.config.log_decisions {
            self.log(out, SentinelEvent::Decision { device: device.to_string(), verdict: decision.verdict, signature: sig });
        }
        Ok(decision)
    }

    pub fn on_timer(&mut self, timer: &Timer, now: SimTime, out: &mut Vec<Action>) {
        match timer {
            Timer::ProfilingDone { device } => {
                // unknown devices cannot have timers; ignore defensively
                let _ = self.finish_profiling(device, now, out);
            }
            Timer::SyncTimeout { request } => self.on_sync_timeout(*request, now, out),
        }
    }

    // ---- mining ----

    pub fn build_round_candidates(&self, now: SimTime) -> Result<RoundCandidates, SentinelError> {
        if self.subscriptions.is_empty() {
            return Err(SentinelError::NoSubscriptions);
        }
        let mut whitelist = Vec::new();
        for chain in self.chains() {
            let Some(view) = self.views.get(&chain) else { continue };
            let Some(tip) = view.tip else { continue };
            let signatures: Vec<PacketSignature> = self
                .observed
                .get(&chain)
                .map(|obs| obs.iter().filter(|s| !view.full.contains(s)).copied().collect())
                .unwrap_or_default();
            whitelist.push(WhitelistBlock {
                prev_hash: tip,
                chain_id: chain,
                sentinel_address: self.address,
                timestamp: now,
                signatures,
            });
        }
        let control = ControlBlock {
            prev_hash: self.store.control_tip(),
            timestamp: now,
            sentinel_address: self.address,
            whitelist_headers: whitelist.iter().map(|b| b.hash()).collect(),
            nonce: 0,
            target: self.config.target,
        };
        Ok(RoundCandidates { control, whitelist })
    }

    /// Simulated win: build on the current tips, store, and broadcast.
    pub fn on_block_win(&mut self, now: SimTime, out: &mut Vec<Action>) -> Result<Arc<Message>, SentinelError> {
        let round = self.build_round_candidates(now)?;
        Ok(self.commit_round(round, now, out))
    }

    fn commit_round(&mut self, round: RoundCandidates, now: SimTime, out: &mut Vec<Action>) -> Arc<Message> {
        for block in &round.whitelist {
            // a duplicate can only be our own identical block; keep going
            let _ = self.store.insert_whitelist(block.clone());
        }
        let control_hash = round.control.hash();
        self.store.insert_control(round.control.clone()).expect("candidate builds on the control tip");
        self.after_control_insert();
        let height = self.store.control().get(&control_hash).map_or(0, |n| n.height);
        self.log(out, SentinelEvent::Mined { control: control_hash, height, headers: round.control.whitelist_headers.clone() });
        for chain in self.chains() {
            self.refresh_chain(&chain, out);
        }
        let msg = Arc::new(Message::Announce { control: round.control, whitelist: round.whitelist });
        out.push(Action::Broadcast { to: self.active_peers(now), msg: msg.clone() });
        msg
    }

    /// Activity heartbeat to every peer, active or not.
    pub fn emit_share(&self, nonce: u64, out: &mut Vec<Action>) {
        out.push(Action::Broadcast { to: self.peers.clone(), msg: Arc::new(Message::Share { nonce }) });
    }

    /// Real proof of work: hash up to `budget` nonces on the current
    /// candidate, rebuilding it first if the tips or local signatures moved.
    /// Returns the announcement if a block was solved and the shares found.
    pub fn mine_tick(&mut self, ctx: &PowContext, budget: u64, now: SimTime, out: &mut Vec<Action>) -> (Option<Arc<Message>>, u64) {
        if !self.is_mining() || budget == 0 {
            return (None, 0);
        }
        if self.job_stale || self.job.is_none() {
            let round = self.build_round_candidates(now).expect("mining implies a subscription");
            let miner = Miner::new(&round.control);
            self.job = Some(MiningJob { round, miner });
            self.job_stale = false;
        }
        let mut shares = 0;
        let mut left = budget;
        while left > 0 {
            let job = self.job.as_mut().expect("built above");
            let start = job.miner.next_nonce();
            let outcome = job.miner.step(ctx, left);
            left = left.saturating_sub(job.miner.next_nonce().wrapping_sub(start).max(1));
            match outcome {
                MineOutcome::Solved(nonce) => {
                    let mut round = self.job.take().expect("present").round;
                    round.control.nonce = nonce;
                    self.job_stale = true;
                    return (Some(self.commit_round(round, now, out)), shares);
                }
                MineOutcome::Share(nonce) => {
                    shares += 1;
                    self.emit_share(nonce, out);
                }
                MineOutcome::Exhausted(_) => break,
            }
        }
        (None, shares)
    }

    // ---- incoming messages ----

    pub fn on_message(&mut self, from: PeerId, msg: &Message, now: SimTime, out: &mut Vec<Action>) {
        match msg {
            Message::Announce { control, whitelist } => {
                self.ingest(from, std::slice::from_ref(control), whitelist, now, true, out);
            }
            Message::Share { .. } => self.activity.record_share(from, now),
            Message::SyncRequest { request, chain_id } => {
                let (control, whitelist) = self.chain_sync_payload(chain_id);
                let reply = Message::SyncResponse { request: *request, chain_id: *chain_id, control, whitelist };
                out.push(Action::Send { to: from, msg: Arc::new(reply) });
            }
            Message::SyncResponse { request, chain_id, control, whitelist } => {
                if self.syncs.get(request).is_some_and(|s| s.chain_id == *chain_id) {
                    self.syncs.remove(request);
                }
                self.ingest(from, control, whitelist, now, false, out);
            }
            Message::GetBlocks { control, whitelist } => {
                let reply = self.get_blocks_payload(control.as_ref(), whitelist.as_ref());
                out.push(Action::Send { to: from, msg: Arc::new(reply) });
            }
            Message::Blocks { control, whitelist } => self.ingest(from, control, whitelist, now, false, out),
        }
    }

    /// Blocks of one chain plus the recent control chain, oldest first.
    pub fn chain_sync_payload(&self, chain_id: &ChainId) -> (Vec<ControlBlock>, Vec<WhitelistBlock>) {
        let Some(tree) = self.store.device_tree(chain_id) else { return (Vec::new(), Vec::new()) };
        let whitelist = tree.iter().map(|n| n.block.clone()).collect();
        let mut control: Vec<ControlBlock> = self
            .store
            .control()
            .ancestry(&self.store.control_tip())
            .take(SYNC_CONTROL_LIMIT)
            .filter(|n| !n.block.is_genesis())
            .map(|n| n.block.clone())
            .collect();
        control.reverse();
        (control, whitelist)
    }

    fn get_blocks_payload(&self, control: Option<&BlockHash>, whitelist: Option<&(ChainId, BlockHash)>) -> Message {
        let mut controls = Vec::new();
        let mut blocks = Vec::new();
        if let Some(hash) = control {
            controls = self
                .store
                .control()
                .ancestry(hash)
                .take(GET_BLOCKS_LIMIT)
                .filter(|n| !n.block.is_genesis())
                .map(|n| n.block.clone())
                .collect();
            controls.reverse();
            for c in &controls {
                for header in &c.whitelist_headers {
                    if let Some(b) = self.find_whitelist(header) {
                        blocks.push(b.clone());
                    }
                }
            }
        }
        if let Some((chain, hash)) = whitelist {
            if let Some(tree) = self.store.device_tree(chain) {
                let mut chain_blocks: Vec<_> = tree.ancestry(hash).take(GET_BLOCKS_LIMIT).map(|n| n.block.clone()).collect();
                chain_blocks.reverse();
                blocks.extend(chain_blocks);
            }
        }
        Message::Blocks { control: controls, whitelist: blocks }
    }

    fn find_whitelist(&self, hash: &BlockHash) -> Option<&WhitelistBlock> {
        self.store.chains().find_map(|c| self.store.device_tree(c).and_then(|t| t.get(hash)).map(|n| &n.block))
    }

    fn request_missing(&mut self, from: PeerId, control: Option<BlockHash>, whitelist: Option<(ChainId, BlockHash)>, now: SimTime, out: &mut Vec<Action>) {
        let key = control.or(whitelist.map(|w| w.1)).expect("one of the two is set");
        if let Some(&at) = self.requested.get(&key) {
            if now.saturating_sub(at) < REREQUEST_AFTER {
                return;
            }
        }
        self.requested.insert(key, now);
        out.push(Action::Send { to: from, msg: Arc::new(Message::GetBlocks { control, whitelist }) });
    }

    fn ingest(&mut self, from: PeerId, controls: &[ControlBlock], whitelist: &[WhitelistBlock], now: SimTime, announce: bool, out: &mut Vec<Action>) {
        let mut queue: VecDeque<Pending> = whitelist.iter().cloned().map(Pending::Whitelist).collect();
        queue.extend(controls.iter().cloned().map(Pending::Control));
        let mut touched = BTreeSet::new();
        let mut control_changed = false;
        let mut relay_control = None;
        let mut relay_whitelist = Vec::new();

        while let Some(item) = queue.pop_front() {
            match item {
                Pending::Whitelist(block) => {
                    let chain = block.chain_id;
                    if !self.views.contains_key(&chain) {
                        if announce {
                            relay_whitelist.push(block);
                        }
                        continue;
                    }
                    let hash = block.hash();
                    if self.store.contains_whitelist(&chain, &hash) {
                        continue;
                    }
                    if block.is_genesis() && !is_self_certified_genesis(&block) {
                        self.log(out, SentinelEvent::BlockDiscarded { chain, hash, reason: "genesis does not match chain id".into() });
                        continue;
                    }
                    if block.has_duplicates() {
                        self.log(out, SentinelEvent::BlockDiscarded { chain, hash, reason: "duplicate signatures".into() });
                        continue;
                    }
                    if !block.is_genesis() && !self.store.contains_whitelist(&chain, &block.prev_hash) {
                        let prev = block.prev_hash;
                        self.orphans.add(prev, Pending::Whitelist(block), self.config.orphan_capacity);
                        self.request_missing(from, None, Some((chain, prev)), now, out);
                        continue;
                    }
                    let unrecognized: Vec<PacketSignature> =
                        block.signatures.iter().filter(|s| !self.is_recognized(&chain, s)).copied().collect();
                    self.store.insert_whitelist(block.clone()).expect("parent checked");
                    self.requested.remove(&hash);
                    let height = self.store.device_tree(&chain).and_then(|t| t.get(&hash)).map_or(0, |n| n.height);
                    if unrecognized.is_empty() {
                        self.log(out, SentinelEvent::BlockAccepted { chain, hash, height });
                        if announce {
                            relay_whitelist.push(block);
                        }
                    } else {
                        self.log(out, SentinelEvent::BlockRejected { chain, hash, height, unrecognized });
                    }
                    touched.insert(chain);
                    queue.extend(self.orphans.take_children(&hash));
                }
                Pending::Control(block) => {
                    let hash = block.hash();
                    if self.store.contains_control(&hash) {
                        continue;
                    }
                    match validate_control_block(&block, &self.store, self.config.pow_mode) {
                        Validity::Valid | Validity::Pending => {
                            self.store.insert_control(block.clone()).expect("validated");
                            self.requested.remove(&hash);
                            self.after_control_insert();
                            control_changed = true;
                            if announce {
                                relay_control = Some(block);
                            }
                            queue.extend(self.orphans.take_children(&hash));
                        }
                        Validity::Invalid(reasons) if reasons == [RejectReason::Orphan] => {
                            let prev = block.prev_hash;
                            self.orphans.add(prev, Pending::Control(block), self.config.orphan_capacity);
                            self.request_missing(from, Some(prev), None, now, out);
                        }
                        Validity::Invalid(reasons) => {
                            self.log(out, SentinelEvent::ControlRejected { hash, reasons });
                        }
                    }
                }
            }
        }

        let refresh: BTreeSet<ChainId> = if control_changed { self.chains() } else { touched };
        for chain in refresh {
            self.refresh_chain(&chain, out);
        }
        if self.config.relay {
            if let Some(control) = relay_control {
                let to: Vec<PeerId> = self.active_peers(now).into_iter().filter(|&p| p != from).collect();
                let msg = Message::Announce { control, whitelist: relay_whitelist };
                out.push(Action::Broadcast { to, msg: Arc::new(msg) });
            }
        }
    }

    fn after_control_insert(&mut self) {
        self.job_stale = true;
        self.control_inserts += 1;
        if self.control_inserts.is_multiple_of(self.config.prune_every) {
            self.prune();
        }
    }

    fn prune(&mut self) {
        let depth = self.config.prune_depth;
        self.store.prune_control(depth);
        for (chain, view) in &self.views {
            let protected: Vec<BlockHash> = view.tip.into_iter().chain(view.recognized_tip).collect();
            self.store.prune_device_chain(chain, depth, &protected);
        }
        self.requested.clear();
    }

    // ---- fork choice ----

    /// Re-runs fork choice for one chain: the longest anchored branch whose
    /// signatures are all recognized, unless an unrecognized branch leads it
    /// by the adoption margin.
    fn refresh_chain(&mut self, chain: &ChainId, out: &mut Vec<Action>) {
        let Some(tree) = self.store.device_tree(chain) else { return };
        let empty = BTreeSet::new();
        let observed = self.observed.get(chain).unwrap_or(&empty);
        let adopted = self.adopted.get(chain).unwrap_or(&empty);

        let mut flags: HashMap<BlockHash, (bool, bool)> = HashMap::with_capacity(tree.len());
        let mut best_any: Option<(u64, u64, BlockHash)> = None;
        let mut best_rec: Option<(u64, u64, BlockHash)> = None;
        let better = |cur: &Option<(u64, u64, BlockHash)>, h: u64, r: u64| match cur {
            None => true,
            Some((ch, cr, _)) => h > *ch || (h == *ch && r < *cr),
        };
        for node in tree.iter() {
            let (pa, pr) = node.parent.and_then(|p| flags.get(&p).copied()).unwrap_or((node.parent.is_none(), node.parent.is_none()));
            let anchored = pa && self.store.is_anchored(&node.block, &node.hash);
            let recognized = pr && node.block.signatures.iter().all(|s| observed.contains(s) || adopted.contains(s));
            flags.insert(node.hash, (anchored, recognized));
            if anchored {
                if better(&best_any, node.height, node.receipt) {
                    best_any = Some((node.height, node.receipt, node.hash));
                }
                if recognized && better(&best_rec, node.height, node.receipt) {
                    best_rec = Some((node.height, node.receipt, node.hash));
                }
            }
        }

        let margin = self.config.adoption_margin;
        let (tip, adopt) = match (best_rec, best_any) {
            (Some(r), Some(a)) if a.0 >= r.0 + margin => (Some(a.2), true),
            (Some(r), _) => (Some(r.2), false),
            (None, Some(a)) if a.0 + 1 >= margin => (Some(a.2), true),
            _ => (None, false),
        };
        let recognized_tip = best_rec.map(|r| r.2);

        if adopt {
            let tip = tip.expect("set with adopt");
            let mut new_sigs: BTreeSet<PacketSignature> = BTreeSet::new();
            for node in tree.ancestry(&tip) {
                for s in &node.block.signatures {
                    if !observed.contains(s) && !adopted.contains(s) {
                        new_sigs.insert(*s);
                    }
                }
            }
            let signatures: Vec<PacketSignature> = new_sigs.iter().copied().collect();
            self.adopted.entry(*chain).or_default().extend(new_sigs);
            out.push(Action::Log(SentinelEvent::Adopted { chain: *chain, tip, signatures }));
        }

        let tree = self.store.device_tree(chain).expect("checked above");
        let view = self.views.entry(*chain).or_default();
        view.recognized_tip = if adopt { tip } else { recognized_tip };
        let Some(tip) = tip else { return };
        if view.tip == Some(tip) {
            return;
        }
        if let Some(old) = view.tip {
            if !tree.is_ancestor(&old, &tip) {
                out.push(Action::Log(SentinelEvent::Reorg { chain: *chain, from: old, to: tip }));
            }
        }
        view.tip = Some(tip);
        view.full.update(tree, tip);
        let confirmed_tip = tree.ancestor_at_depth(&tip, self.config.confirmations).expect("tip is stored");
        let delta = view.confirmed.update(tree, confirmed_tip);
        self.job_stale = true;
        if !delta.is_empty() {
            out.push(Action::Log(SentinelEvent::WhitelistChanged { chain: *chain, added: delta.added, removed: delta.removed }));
        }
    }

    // ---- chain sync ----

    fn pick_peer(&mut self, exclude: Option<PeerId>) -> Option<PeerId> {
        let choices: Vec<PeerId> = self.peers.iter().copied().filter(|p| Some(*p) != exclude).collect();
        if choices.is_empty() {
            return exclude.filter(|p| self.peers.contains(p));
        }
        Some(choices[self.rng.random_range(0..choices.len())])
    }

    /// Starts a request/response download of `chain` from one peer.
    pub fn start_sync(&mut self, chain: ChainId, now: SimTime, out: &mut Vec<Action>) {
        let Some(peer) = self.pick_peer(None) else { return };
        self.chain_sync(peer, chain, now, out);
    }

    pub fn chain_sync(&mut self, peer: PeerId, chain: ChainId, now: SimTime, out: &mut Vec<Action>) {
        let request = self.next_request;
        self.next_request += 1;
        self.syncs.insert(request, SyncState { chain_id: chain, peer, attempts: 1 });
        self.send_sync(request, peer, chain, now, out);
    }

    fn send_sync(&mut self, request: u64, peer: PeerId, chain: ChainId, now: SimTime, out: &mut Vec<Action>) {
        out.push(Action::Send { to: peer, msg: Arc::new(Message::SyncRequest { request, chain_id: chain }) });
        out.push(Action::SetTimer { at: now + self.config.sync_timeout, timer: Timer::SyncTimeout { request } });
    }

    pub fn pending_syncs(&self) -> usize {
        self.syncs.len()
    }

    fn on_sync_timeout(&mut self, request: u64, now: SimTime, out: &mut Vec<Action>) {
        let Some(state) = self.syncs.get(&request).cloned() else { return };
        if state.attempts > self.config.sync_retries {
            self.syncs.remove(&request);
            self.log(out, SentinelEvent::SyncGaveUp { chain: state.chain_id });
            return;
        }
        let peer = self.pick_peer(Some(state.peer)).unwrap_or(state.peer);
        self.syncs.insert(request, SyncState { peer, attempts: state.attempts + 1, ..state });
        self.send_sync(request, peer, state.chain_id, now, out);
    }
}
