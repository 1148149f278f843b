//! Deterministic discrete-event plumbing: virtual time, an ordered event
//! queue, and message delivery with latency and loss over a peer topology.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    PacketArrival,
    MessageDelivery,
    Timer,
    MiningResult,
}

#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: P,
}

impl<P> PartialEq for SimEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_at, self.seq) == (other.fire_at, other.seq)
    }
}

impl<P> Eq for SimEvent<P> {}

impl<P> PartialOrd for SimEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for SimEvent<P> {
    // reversed: BinaryHeap is a max-heap and we want the earliest first
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// Min-queue on `(fire_at, seq)`. `seq` is assigned at scheduling time, so
/// equal-time events pop in the order they were scheduled.
#[derive(Debug, Clone)]
pub struct EventQueue<P> {
    heap: BinaryHeap<SimEvent<P>>,
    now: SimTime,
    next_seq: u64,
    processed: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), now: SimTime::ZERO, next_seq: 0, processed: 0 }
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.fire_at)
    }

    /// Schedules at `at`, clamped to the present so nothing fires in the past.
    pub fn schedule(&mut self, at: SimTime, kind: EventKind, payload: P) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent { fire_at: at.max(self.now), seq, kind, payload });
        seq
    }

    pub fn schedule_after(&mut self, delay: SimTime, kind: EventKind, payload: P) -> u64 {
        self.schedule(self.now + delay, kind, payload)
    }

    /// Pops the next event with `fire_at <= t_end` and advances the clock.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<SimEvent<P>> {
        if self.heap.peek()?.fire_at > t_end {
            return None;
        }
        let event = self.heap.pop()?;
        self.now = event.fire_at;
        self.processed += 1;
        Some(event)
    }

    /// Processes every event up to `t_end`; the handler may schedule more.
    /// Returns the number handled and leaves the clock at `t_end`.
    pub fn run_until(&mut self, t_end: SimTime, mut handler: impl FnMut(&mut Self, SimEvent<P>)) -> u64 {
        assert!(t_end >= self.now, "cannot run backwards");
        let mut count = 0;
        while let Some(event) = self.pop_until(t_end) {
            handler(self, event);
            count += 1;
        }
        self.now = t_end;
        count
    }
}

/// Seed for the `index`-th stream labelled `label`. Streams are independent
/// of how many other nodes or devices exist.
pub fn derive_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut buf = Vec::with_capacity(16 + label.len());
    buf.extend_from_slice(&master.to_be_bytes());
    buf.extend_from_slice(label.as_bytes());
    buf.push(0);
    buf.extend_from_slice(&index.to_be_bytes());
    sha256(&buf)
}

pub fn child_rng(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master, label, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Adjacency {
    FullMesh,
    /// Each node links to the `neighbours` nearest nodes on each side of a ring.
    Ring { neighbours: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("topology needs at least one node")]
    NoNodes,
    #[error("loss probability must be in [0, 1), got {0}")]
    BadLoss(f64),
    #[error("latency bounds must satisfy 0 <= min <= max, got {0}..{1} ms")]
    BadLatency(f64, f64),
    #[error("ring needs at least one neighbour")]
    BadRing,
    #[error("no link from {0} to {1}")]
    NoEdge(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologyConfig {
    pub nodes: usize,
    pub adjacency: Adjacency,
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    pub loss: f64,
    pub seed: u64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig { nodes: 1, adjacency: Adjacency::FullMesh, latency_min_ms: 10.0, latency_max_ms: 100.0, loss: 0.0, seed: 0 }
    }
}

impl TopologyConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.nodes == 0 {
            return Err(NetError::NoNodes);
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err(NetError::BadLoss(self.loss));
        }
        let ok = self.latency_min_ms.is_finite()
            && self.latency_max_ms.is_finite()
            && 0.0 <= self.latency_min_ms
            && self.latency_min_ms <= self.latency_max_ms;
        if !ok {
            return Err(NetError::BadLatency(self.latency_min_ms, self.latency_max_ms));
        }
        if matches!(self.adjacency, Adjacency::Ring { neighbours: 0 }) {
            return Err(NetError::BadRing);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub lost: u64,
}

/// Links and the delivery model. Holds its own RNG stream for latency and loss.
#[derive(Debug, Clone)]
pub struct Network {
    config: TopologyConfig,
    links: Vec<BTreeSet<usize>>,
    rng: ChaCha8Rng,
    stats: NetStats,
}

impl Network {
    pub fn new(config: TopologyConfig) -> Result<Self, NetError> {
        config.validate()?;
        let n = config.nodes;
        let links = (0..n)
            .map(|i| match config.adjacency {
                Adjacency::FullMesh => (0..n).filter(|&j| j != i).collect(),
                Adjacency::Ring { neighbours } => {
                    let k = neighbours.min(n.saturating_sub(1));
                    (1..=k).flat_map(|d| [(i + d) % n, (i + n - d % n) % n]).filter(|&j| j != i).collect()
                }
            })
            .collect();
        let rng = child_rng(config.seed, "network", 0);
        Ok(Network { config, links, rng, stats: NetStats::default() })
    }

    pub fn config(&self) -> &TopologyConfig {
        &self.config
    }

    pub fn is_full_mesh(&self) -> bool {
        matches!(self.config.adjacency, Adjacency::FullMesh)
    }

    pub fn neighbours(&self, node: usize) -> Vec<usize> {
        self.links[node].iter().copied().collect()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.links.get(from).is_some_and(|l| l.contains(&to))
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn sample_latency(&mut self) -> SimTime {
        let (lo, hi) = (self.config.latency_min_ms, self.config.latency_max_ms);
        let ms = if hi > lo { self.rng.random_range(lo..=hi) } else { lo };
        SimTime((ms * 1000.0).round() as u64)
    }

    /// Arrival time of a message sent now, or `None` if the link lost it.
    pub fn deliver(&mut self, from: usize, to: usize, now: SimTime) -> Result<Option<SimTime>, NetError> {
        if !self.has_edge(from, to) {
            return Err(NetError::NoEdge(from, to));
        }
        self.stats.sent += 1;
        if self.config.loss > 0.0 && self.rng.random_bool(self.config.loss) {
            self.stats.lost += 1;
            return Ok(None);
        }
        self.stats.delivered += 1;
        Ok(Some(now + self.sample_latency()))
    }
}
