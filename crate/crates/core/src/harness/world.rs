use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ConfigError, ExperimentConfig};
use super::metrics::{build_report, MetricsReport};
use crate::consensus::pow::exp_sample;
use crate::consensus::{schedule_block_delay, PowContext};
use crate::devsim::{inject_attack, replay_next_index, DeviceTrace, Infection};
use crate::digest::{ChainId, PacketSignature};
use crate::ledger::{BlockArchive, PowMode};
use crate::netsim::{child_rng, EventKind, EventQueue, Network};
use crate::sentinel::{Action, Message, PeerId, SentinelEvent, SentinelState, Timer, Verdict};
use crate::time::SimTime;

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    /// Simulated microseconds.
    pub time: SimTime,
    pub node: PeerId,
    #[serde(flatten)]
    pub event: SentinelEvent,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceTally {
    pub legit_forwarded: u64,
    pub legit_dropped: u64,
    pub attack_forwarded: u64,
    pub attack_dropped: u64,
    pub profile_passed: u64,
}

#[derive(Debug, Clone)]
pub(crate) struct Device {
    pub node: PeerId,
    pub id: String,
    pub label: String,
    pub trace: usize,
    pub rng: ChaCha8Rng,
    pub attack: Option<PacketSignature>,
    pub attack_rng: ChaCha8Rng,
    pub tally: DeviceTally,
}

#[derive(Debug, Clone)]
enum Ev {
    Packet { device: usize, record: usize },
    Attack { device: usize },
    Deliver { from: PeerId, to: PeerId, msg: Arc<Message> },
    Timer { node: PeerId, timer: Timer },
    Win { node: PeerId },
    Tick { node: PeerId },
    Share { node: PeerId },
}

/// Online counters fed by the sentinels' log events.
#[derive(Debug, Clone, Default)]
pub(crate) struct Collector {
    pub last_whitelist_change: BTreeMap<ChainId, SimTime>,
    /// First time each (node, attack signature) pair was enforced.
    pub attack_enforced: BTreeMap<(PeerId, PacketSignature), SimTime>,
    pub chain_labels: BTreeMap<ChainId, BTreeSet<String>>,
    pub control_rejected: u64,
    pub blocks_rejected: BTreeMap<ChainId, u64>,
    pub adoptions: BTreeMap<ChainId, u64>,
    pub reorgs: u64,
    pub mined: Vec<u64>,
    pub shares_found: u64,
    pub sync_gave_up: u64,
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub archive: BlockArchive,
    /// Present when event capture was requested.
    pub events: Option<Vec<LogLine>>,
}

pub struct World {
    pub(crate) cfg: ExperimentConfig,
    pub(crate) seed: u64,
    queue: EventQueue<Ev>,
    started: bool,
    pub(crate) net: Network,
    pub(crate) nodes: Vec<SentinelState>,
    pub(crate) devices: Vec<Device>,
    device_index: BTreeMap<String, usize>,
    traces: Vec<DeviceTrace>,
    trace_sigs: Vec<Vec<PacketSignature>>,
    mining_rngs: Vec<ChaCha8Rng>,
    pow: Vec<PowContext>,
    share_rate: f64,
    pub(crate) archive: BlockArchive,
    pub(crate) collector: Collector,
    events: Option<Vec<LogLine>>,
    pub(crate) infections: Vec<Infection>,
    pub(crate) attack_sigs: BTreeSet<PacketSignature>,
    pub(crate) messages: BTreeMap<String, u64>,
}

impl World {
    pub fn new(cfg: &ExperimentConfig, seed: u64, capture_events: bool) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let cfg = cfg.clone();
        let trace_map = cfg.resolve_traces()?;
        let labels: Vec<String> = trace_map.keys().cloned().collect();
        let traces: Vec<DeviceTrace> = trace_map.into_values().collect();
        let trace_sigs = traces
            .iter()
            .map(|t| t.records.iter().map(|r| crate::sigcore::compute_signature(r).expect("validated")).collect())
            .collect();

        let net = Network::new(cfg.topology(seed)).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let scfg = cfg.sentinel_config();
        let nodes = (0..cfg.sentinels)
            .map(|i| SentinelState::new(i, net.neighbours(i), scfg.clone(), child_rng(seed, "sentinel", i as u64)))
            .collect();

        let mut devices = Vec::new();
        for (node, plan) in cfg.device_plan().into_iter().enumerate() {
            for (j, label) in plan.into_iter().enumerate() {
                let idx = devices.len() as u64;
                devices.push(Device {
                    node,
                    id: format!("s{node}-d{j}-{label}"),
                    trace: labels.iter().position(|l| *l == label).expect("resolved"),
                    label,
                    rng: child_rng(seed, "device", idx),
                    attack: None,
                    attack_rng: child_rng(seed, "attack-device", idx),
                    tally: DeviceTally::default(),
                });
            }
        }
        let device_index = devices.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();

        let mut infections = Vec::new();
        let mut attack_sigs = BTreeSet::new();
        if let Some(attack) = &cfg.attack {
            let population: Vec<usize> = (0..devices.len())
                .filter(|&i| attack.target.as_ref().is_none_or(|t| devices[i].label == *t))
                .collect();
            if !population.is_empty() {
                let mut rng = child_rng(seed, "attack", 0);
                let picked = inject_attack(population.len(), &attack.profile(), &mut rng)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                for inf in picked {
                    let device = population[inf.device];
                    let sig = inf.signature();
                    devices[device].attack = Some(sig);
                    attack_sigs.insert(sig);
                    infections.push(Infection { device, record: inf.record });
                }
            }
        }

        let total = cfg.total_weight();
        let sim_rate = 1.0 / (cfg.block_interval * total);
        let pow = (0..cfg.sentinels)
            .map(|i| PowContext {
                target: cfg.pow.target(),
                share_target: cfg.pow.share_target(),
                mode: cfg.pow.mode,
                sim_rate,
                hash_weight: cfg.weight(i),
            })
            .collect();
        let share_rate = cfg.protocol.shares_per_window / cfg.activity_window().as_secs_f64();

        Ok(World {
            seed,
            queue: EventQueue::new(),
            started: false,
            net,
            nodes,
            devices,
            device_index,
            traces,
            trace_sigs,
            mining_rngs: (0..cfg.sentinels).map(|i| child_rng(seed, "mining", i as u64)).collect(),
            pow,
            share_rate,
            archive: BlockArchive::new(),
            collector: Collector::default(),
            events: capture_events.then(Vec::new),
            infections,
            attack_sigs,
            messages: BTreeMap::new(),
            cfg,
        })
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn nodes(&self) -> &[SentinelState] {
        &self.nodes
    }

    pub fn archive(&self) -> &BlockArchive {
        &self.archive
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Captured log lines so far, when capture is on.
    pub fn events(&self) -> Option<&[LogLine]> {
        self.events.as_deref()
    }

    pub fn attack_signatures(&self) -> &BTreeSet<PacketSignature> {
        &self.attack_sigs
    }

    fn start(&mut self) {
        for d in 0..self.devices.len() {
            let node = self.devices[d].node;
            let id = self.devices[d].id.clone();
            let mut out = Vec::new();
            self.nodes[node].on_device_connected(&id, SimTime::ZERO, &mut out).expect("device ids are unique");
            self.apply(node, out);
            self.schedule_packet(d);
            if self.devices[d].attack.is_some() {
                let start = SimTime::from_secs_f64(self.cfg.attack.as_ref().expect("infected implies attack").start);
                let delay = self.attack_delay(d);
                self.queue.schedule(start + delay, EventKind::PacketArrival, Ev::Attack { device: d });
            }
        }
    }

    fn schedule_packet(&mut self, d: usize) {
        let dev = &mut self.devices[d];
        let trace = &self.traces[dev.trace];
        let (delay, record) = replay_next_index(trace, &mut dev.rng, trace.mean_interval);
        self.queue.schedule_after(SimTime::from_secs_f64(delay), EventKind::PacketArrival, Ev::Packet { device: d, record });
    }

    fn attack_delay(&mut self, d: usize) -> SimTime {
        let rate = self.cfg.attack.as_ref().expect("attack configured").rate;
        SimTime::from_secs_f64(exp_sample(rate, &mut self.devices[d].attack_rng))
    }

    /// Processes events up to `until` (clamped to the configured duration).
    pub fn advance(&mut self, until: SimTime) {
        if !self.started {
            self.started = true;
            self.start();
        }
        let end = until.min(SimTime::from_secs_f64(self.cfg.duration));
        while let Some(event) = self.queue.pop_until(end) {
            self.handle(event.payload);
        }
    }

    /// Report over the current state.
    pub fn report(&self) -> MetricsReport {
        build_report(self, self.queue.processed())
    }

    /// Runs to the configured duration and builds the report.
    pub fn run(mut self) -> RunOutput {
        self.advance(SimTime::MAX);
        let report = self.report();
        RunOutput { report, archive: self.archive, events: self.events }
    }

    fn handle(&mut self, ev: Ev) {
        let now = self.queue.now();
        match ev {
            Ev::Packet { device, record } => {
                let sig = self.trace_sigs[self.devices[device].trace][record];
                self.filter(device, sig, false, now);
                self.schedule_packet(device);
            }
            Ev::Attack { device } => {
                let sig = self.devices[device].attack.expect("only infected devices attack");
                self.filter(device, sig, true, now);
                let delay = self.attack_delay(device);
                self.queue.schedule_after(delay, EventKind::PacketArrival, Ev::Attack { device });
            }
            Ev::Deliver { from, to, msg } => {
                let mut out = Vec::new();
                self.nodes[to].on_message(from, &msg, now, &mut out);
                self.apply(to, out);
            }
            Ev::Timer { node, timer } => {
                let mut out = Vec::new();
                self.nodes[node].on_timer(&timer, now, &mut out);
                self.apply(node, out);
            }
            Ev::Win { node } => {
                let mut out = Vec::new();
                if self.nodes[node].on_block_win(now, &mut out).is_ok() {
                    self.collector.mined.resize(self.nodes.len(), 0);
                    self.collector.mined[node] += 1;
                }
                self.apply(node, out);
                let delay = schedule_block_delay(&self.pow[node], &mut self.mining_rngs[node]);
                self.queue.schedule_after(SimTime::from_secs_f64(delay), EventKind::MiningResult, Ev::Win { node });
            }
            Ev::Tick { node } => {
                let ctx = self.pow[node];
                let tick = self.cfg.pow.tick;
                let budget = (ctx.target.expected_attempts() * tick * ctx.hash_weight
                    / (self.cfg.block_interval * self.cfg.total_weight()))
                .round()
                .max(1.0) as u64;
                let mut out = Vec::new();
                let (solved, shares) = self.nodes[node].mine_tick(&ctx, budget, now, &mut out);
                self.collector.shares_found += shares;
                if solved.is_some() {
                    self.collector.mined.resize(self.nodes.len(), 0);
                    self.collector.mined[node] += 1;
                }
                self.apply(node, out);
                self.queue.schedule_after(SimTime::from_secs_f64(tick), EventKind::MiningResult, Ev::Tick { node });
            }
            Ev::Share { node } => {
                let mut out = Vec::new();
                self.nodes[node].emit_share(0, &mut out);
                self.apply(node, out);
                self.schedule_share(node);
            }
        }
    }

    fn schedule_share(&mut self, node: PeerId) {
        let delay = exp_sample(self.share_rate, &mut self.mining_rngs[node]);
        self.queue.schedule_after(SimTime::from_secs_f64(delay), EventKind::Timer, Ev::Share { node });
    }

    fn filter(&mut self, device: usize, sig: PacketSignature, attack: bool, now: SimTime) {
        let node = self.devices[device].node;
        let id = self.devices[device].id.clone();
        let mut out = Vec::new();
        let decision = self.nodes[node].on_signature(&id, sig, now, &mut out).expect("device is connected");
        let t = &mut self.devices[device].tally;
        match (decision.verdict, attack) {
            (Verdict::ProfilePass, _) => t.profile_passed += 1,
            (Verdict::Forward, false) => t.legit_forwarded += 1,
            (Verdict::Drop, false) => t.legit_dropped += 1,
            (Verdict::Forward, true) => t.attack_forwarded += 1,
            (Verdict::Drop, true) => t.attack_dropped += 1,
        }
        self.apply(node, out);
    }

    fn send(&mut self, from: PeerId, to: PeerId, msg: &Arc<Message>) {
        *self.messages.entry(msg.kind().to_string()).or_default() += 1;
        let now = self.queue.now();
        if let Ok(Some(at)) = self.net.deliver(from, to, now) {
            self.queue.schedule(at, EventKind::MessageDelivery, Ev::Deliver { from, to, msg: msg.clone() });
        }
    }

    fn apply(&mut self, node: PeerId, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send { to, msg } => self.send(node, to, &msg),
                Action::Broadcast { to, msg } => {
                    if let Message::Announce { control, whitelist } = &*msg {
                        self.archive.record_control(control);
                        for b in whitelist {
                            self.archive.record_whitelist(b);
                        }
                    }
                    for peer in to {
                        self.send(node, peer, &msg);
                    }
                }
                Action::SetTimer { at, timer } => {
                    self.queue.schedule(at, EventKind::Timer, Ev::Timer { node, timer });
                }
                Action::StartMining => self.start_mining(node),
                Action::Genesis(block) => {
                    self.archive.record_whitelist(&block);
                }
                Action::Log(event) => self.observe(node, event),
            }
        }
    }

    fn start_mining(&mut self, node: PeerId) {
        match self.cfg.pow.mode {
            PowMode::Simulated => {
                let delay = schedule_block_delay(&self.pow[node], &mut self.mining_rngs[node]);
                self.queue.schedule_after(SimTime::from_secs_f64(delay), EventKind::MiningResult, Ev::Win { node });
                let mut out = Vec::new();
                self.nodes[node].emit_share(0, &mut out);
                self.apply(node, out);
                self.schedule_share(node);
            }
            PowMode::RealPow => {
                let tick = SimTime::from_secs_f64(self.cfg.pow.tick);
                self.queue.schedule_after(tick, EventKind::MiningResult, Ev::Tick { node });
            }
        }
    }

    fn observe(&mut self, node: PeerId, event: SentinelEvent) {
        let now = self.queue.now();
        let c = &mut self.collector;
        match &event {
            SentinelEvent::Subscribed { device, chain, .. } => {
                let label = self.device_index.get(device).map(|&i| self.devices[i].label.clone()).unwrap_or_default();
                c.chain_labels.entry(*chain).or_default().insert(label);
            }
            SentinelEvent::WhitelistChanged { chain, added, .. } => {
                c.last_whitelist_change.insert(*chain, now);
                for s in added.iter().filter(|s| self.attack_sigs.contains(s)) {
                    c.attack_enforced.entry((node, *s)).or_insert(now);
                }
            }
            SentinelEvent::ControlRejected { .. } => c.control_rejected += 1,
            SentinelEvent::BlockRejected { chain, .. } => *c.blocks_rejected.entry(*chain).or_default() += 1,
            SentinelEvent::Adopted { chain, .. } => *c.adoptions.entry(*chain).or_default() += 1,
            SentinelEvent::Reorg { .. } => c.reorgs += 1,
            SentinelEvent::SyncGaveUp { .. } => c.sync_gave_up += 1,
            _ => {}
        }
        if let Some(events) = &mut self.events {
            events.push(LogLine { time: now, node, event });
        }
    }

    pub(crate) fn device_infected_nodes(&self) -> BTreeSet<PeerId> {
        self.infections.iter().map(|i| self.devices[i.device].node).collect()
    }
}

/// Runs one seed end to end.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64, capture_events: bool) -> Result<RunOutput, ConfigError> {
    Ok(World::new(cfg, seed, capture_events)?.run())
}
