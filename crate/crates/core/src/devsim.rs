//! Virtual IoT devices: trace replay in random order at random intervals,
//! and attack injection.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::pow::exp_sample;
use crate::digest::PacketSignature;
use crate::sigcore::{compute_signature, Direction, PacketRecord, Protocol, SigError};

pub const LIFX_LIKE: &str = "lifx-like";
pub const PLUG_LIKE: &str = "plug-like";
pub const TABLET_LIKE: &str = "tablet-like";
const TABLET_ENDPOINTS: usize = 200;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace label is empty")]
    EmptyLabel,
    #[error("trace {0:?} has no records")]
    Empty(String),
    #[error("mean interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}:{line}: {source}")]
    Record { path: PathBuf, line: usize, source: SigError },
    #[error("record {index} of {label:?}: {source}")]
    InvalidRecord { label: String, index: usize, source: SigError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTrace {
    pub device_type: String,
    pub records: Vec<PacketRecord>,
    /// Default mean gap between packets, simulated seconds.
    pub mean_interval: f64,
}

impl DeviceTrace {
    pub fn new(device_type: impl Into<String>, records: Vec<PacketRecord>, mean_interval: f64) -> Result<Self, TraceError> {
        let trace = DeviceTrace { device_type: device_type.into(), records, mean_interval };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.device_type.trim().is_empty() {
            return Err(TraceError::EmptyLabel);
        }
        if self.records.is_empty() {
            return Err(TraceError::Empty(self.device_type.clone()));
        }
        if !(self.mean_interval > 0.0 && self.mean_interval.is_finite()) {
            return Err(TraceError::BadInterval(self.mean_interval));
        }
        for (i, r) in self.records.iter().enumerate() {
            r.validate()
                .map_err(|source| TraceError::InvalidRecord { label: self.device_type.clone(), index: i, source })?;
        }
        Ok(())
    }

    pub fn signatures(&self) -> BTreeSet<PacketSignature> {
        self.records.iter().map(|r| compute_signature(r).expect("validated")).collect()
    }
}

/// Loads a trace file: one JSON object per line with `protocol`,
/// `endpoint`, `service_port` and `direction`.
pub fn load_trace_file(path: &Path, device_type: &str, mean_interval: f64) -> Result<DeviceTrace, TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io { path: path.to_path_buf(), source })?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| TraceError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PacketRecord = serde_json::from_str(&line)
            .map_err(|source| TraceError::Json { path: path.to_path_buf(), line: idx + 1, source })?;
        rec.validate()
            .map_err(|source| TraceError::Record { path: path.to_path_buf(), line: idx + 1, source })?;
        records.push(rec);
    }
    DeviceTrace::new(device_type, records, mean_interval)
}

/// Next packet: a uniformly chosen record after an exponential delay.
pub fn replay_next<'a, R: Rng + ?Sized>(trace: &'a DeviceTrace, rng: &mut R, mean_interval: f64) -> (f64, &'a PacketRecord) {
    let (delay, idx) = replay_next_index(trace, rng, mean_interval);
    (delay, &trace.records[idx])
}

/// As [`replay_next`], returning the record's index.
pub fn replay_next_index<R: Rng + ?Sized>(trace: &DeviceTrace, rng: &mut R, mean_interval: f64) -> (f64, usize) {
    assert!(mean_interval > 0.0, "mean interval must be positive");
    let delay = exp_sample(1.0 / mean_interval, rng);
    (delay, rng.random_range(0..trace.records.len()))
}

fn flow(protocol: Protocol, endpoint: &str, port: u16, direction: Direction) -> PacketRecord {
    PacketRecord { timestamp: 0.0, protocol, endpoint: endpoint.into(), service_port: port, direction, device_id: String::new() }
}

/// Built-in synthetic traces: a stable bulb, a stable plug, and a
/// general-purpose tablet with a long tail of endpoints.
pub fn bundled_traces() -> Vec<DeviceTrace> {
    let lifx = vec![
        flow(Protocol::Udp, "time1.google.com", 123, Direction::Remote),
        flow(Protocol::Tcp, "104.198.46.246", 56700, Direction::Remote),
    ];
    let plug = vec![
        flow(Protocol::Udp, "pool.ntp.org", 123, Direction::Remote),
        flow(Protocol::Tcp, "plug-cloud.example.com", 443, Direction::Remote),
        flow(Protocol::Udp, "192.168.1.1", 53, Direction::Remote),
    ];
    let tablet = (0..TABLET_ENDPOINTS)
        .map(|i| match i % 4 {
            0 => flow(Protocol::Tcp, &format!("cdn{i}.media.example.net"), 443, Direction::Remote),
            1 => flow(Protocol::Tcp, &format!("api{i}.apps.example.org"), 443, Direction::Remote),
            2 => flow(Protocol::Udp, &format!("stream{i}.video.example.net"), 443, Direction::Remote),
            _ => flow(Protocol::Tcp, &format!("10.20.{}.{}", i / 200, i % 200), 80, Direction::Remote),
        })
        .collect();
    vec![
        DeviceTrace { device_type: LIFX_LIKE.into(), records: lifx, mean_interval: 2.0 },
        DeviceTrace { device_type: PLUG_LIKE.into(), records: plug, mean_interval: 5.0 },
        DeviceTrace { device_type: TABLET_LIKE.into(), records: tablet, mean_interval: 30.0 },
    ]
}

pub fn bundled_trace(label: &str) -> Option<DeviceTrace> {
    bundled_traces().into_iter().find(|t| t.device_type == label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttackKind {
    /// Inbound telnet probes from a per-victim scanner address.
    Scan,
    /// Outbound UDP flood at a per-victim target.
    Flood,
    /// Outbound uploads to one fixed collection server.
    Exfil,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("infected fraction must be in [0, 1], got {0}")]
    BadFraction(f64),
    #[error("attack rate must be positive, got {0}")]
    BadRate(f64),
    #[error("attack start must be non-negative, got {0}")]
    BadStart(f64),
    #[error("attack population is empty")]
    EmptyPopulation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackProfile {
    pub kind: AttackKind,
    /// Simulated seconds.
    pub start: f64,
    /// Attack packets per simulated second per infected device.
    pub rate: f64,
    pub fraction: f64,
}

impl AttackProfile {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(AttackError::BadFraction(self.fraction));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(AttackError::BadRate(self.rate));
        }
        if !(self.start >= 0.0 && self.start.is_finite()) {
            return Err(AttackError::BadStart(self.start));
        }
        Ok(())
    }

    /// Number of devices infected out of `n`: `ceil(f * n)`.
    pub fn infected_count(&self, n: usize) -> usize {
        let want = self.fraction * n as f64;
        if want < 1.0 - 1e-9 {
            return 0;
        }
        ((want - 1e-9).ceil() as usize).min(n)
    }
}

/// One infected device and the malicious flow it starts emitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infection {
    /// Index into the population.
    pub device: usize,
    pub record: PacketRecord,
}

impl Infection {
    pub fn signature(&self) -> PacketSignature {
        compute_signature(&self.record).expect("generated records are valid")
    }
}

fn attack_record<R: Rng + ?Sized>(kind: AttackKind, rng: &mut R) -> PacketRecord {
    match kind {
        AttackKind::Scan => {
            let ip = format!("198.51.{}.{}", rng.random_range(0..=255u8), rng.random_range(1..=254u8));
            flow(Protocol::Tcp, &ip, 23, Direction::Local)
        }
        AttackKind::Flood => {
            let ip = format!("192.0.{}.{}", rng.random_range(0..=255u8), rng.random_range(1..=254u8));
            flow(Protocol::Udp, &ip, rng.random_range(1024..=65535u16), Direction::Remote)
        }
        AttackKind::Exfil => flow(Protocol::Tcp, "203.0.113.66", 4444, Direction::Remote),
    }
}

/// Picks `ceil(f * N)` devices of the population (sorted by index) and
/// gives each its attack flow. SCAN and FLOOD flows differ per victim;
/// EXFIL is one flow shared by every infected device.
pub fn inject_attack<R: Rng + ?Sized>(population: usize, profile: &AttackProfile, rng: &mut R) -> Result<Vec<Infection>, AttackError> {
    profile.validate()?;
    if population == 0 {
        return Err(AttackError::EmptyPopulation);
    }
    let k = profile.infected_count(population);
    if k == 0 {
        if profile.fraction > 0.0 {
            log::warn!("attack fraction {} of {population} devices infects nobody", profile.fraction);
        }
        return Ok(Vec::new());
    }
    let mut chosen = index::sample(rng, population, k).into_vec();
    chosen.sort_unstable();
    let mut used = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    for device in chosen {
        // redraw the rare collision so per-victim flows stay distinct
        let record = loop {
            let r = attack_record(profile.kind, rng);
            if profile.kind == AttackKind::Exfil || used.insert(compute_signature(&r).expect("valid")) {
                break r;
            }
        };
        out.push(Infection { device, record });
    }
    Ok(out)
}
