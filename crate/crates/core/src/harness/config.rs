use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devsim::{bundled_traces, load_trace_file, AttackKind, AttackProfile, DeviceTrace, TraceError, LIFX_LIKE};
use crate::ledger::{PowMode, Target};
use crate::netsim::{Adjacency, TopologyConfig};
use crate::sentinel::SentinelConfig;
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown trace label {0:?}")]
    UnknownTrace(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowConfig {
    pub mode: PowMode,
    /// Real mode: block target is 2^(256 - difficulty_bits).
    pub difficulty_bits: u32,
    /// Real mode: share target is the block target times 2^share_bits.
    pub share_bits: u32,
    /// Real mode: simulated seconds between hashing slices.
    pub tick: f64,
}

impl Default for PowConfig {
    fn default() -> Self {
        PowConfig { mode: PowMode::Simulated, difficulty_bits: 12, share_bits: 4, tick: 1.0 }
    }
}

impl PowConfig {
    pub fn target(&self) -> Target {
        match self.mode {
            PowMode::Simulated => Target::MAX,
            PowMode::RealPow => Target::pow2(256 - self.difficulty_bits),
        }
    }

    pub fn share_target(&self) -> Target {
        match self.mode {
            PowMode::Simulated => Target::MAX,
            PowMode::RealPow => Target::pow2(256 - self.difficulty_bits + self.share_bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub start: f64,
    pub rate: f64,
    pub fraction: f64,
    /// Device label the infection draws from; `None` means every device.
    pub target: Option<String>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { kind: AttackKind::Exfil, start: 300.0, rate: 0.1, fraction: 0.0, target: Some(LIFX_LIKE.into()) }
    }
}

impl AttackConfig {
    pub fn profile(&self) -> AttackProfile {
        AttackProfile { kind: self.kind, start: self.start, rate: self.rate, fraction: self.fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub adjacency: Adjacency,
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    pub loss: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let t = TopologyConfig::default();
        NetworkConfig { adjacency: t.adjacency, latency_min_ms: t.latency_min_ms, latency_max_ms: t.latency_max_ms, loss: t.loss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Seconds.
    pub profiling_duration: f64,
    pub adoption_margin: u64,
    pub confirmations: u64,
    pub prune_depth: u64,
    /// Activity window length in block intervals.
    pub share_window_blocks: f64,
    /// Simulated mode: mean shares each node sends per activity window.
    pub shares_per_window: f64,
    /// Seconds.
    pub sync_timeout: f64,
    pub sync_retries: u32,
    /// Log every filtering decision (large).
    pub log_decisions: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let s = SentinelConfig::default();
        ProtocolConfig {
            profiling_duration: s.profiling_duration.as_secs_f64(),
            adoption_margin: s.adoption_margin,
            confirmations: s.confirmations,
            prune_depth: s.prune_depth,
            share_window_blocks: 10.0,
            shares_per_window: 16.0,
            sync_timeout: s.sync_timeout.as_secs_f64(),
            sync_retries: s.sync_retries,
            log_decisions: false,
        }
    }
}

/// Additional device on one sentinel, on top of the per-sentinel list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraDevice {
    pub sentinel: usize,
    pub device: String,
}

/// A trace file registered under a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    pub label: String,
    pub path: PathBuf,
    pub mean_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sentinels: usize,
    /// Trace labels connected to every sentinel.
    pub devices: Vec<String>,
    pub extra_devices: Vec<ExtraDevice>,
    /// Simulated seconds.
    pub duration: f64,
    /// Target seconds between control blocks.
    pub block_interval: f64,
    pub pow: PowConfig,
    pub attack: Option<AttackConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub traces: Vec<TraceSource>,
    pub network: NetworkConfig,
    pub protocol: ProtocolConfig,
    /// Width of chain-growth buckets, seconds.
    pub growth_bucket: f64,
    /// Per-sentinel mining weight; empty means all equal.
    pub hash_weights: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sentinels: 3,
            devices: vec![LIFX_LIKE.into()],
            extra_devices: Vec::new(),
            duration: 3600.0,
            block_interval: 20.0,
            pow: PowConfig::default(),
            attack: None,
            seeds: vec![1],
            output_dir: None,
            traces: Vec::new(),
            network: NetworkConfig::default(),
            protocol: ProtocolConfig::default(),
            growth_bucket: 3600.0,
            hash_weights: Vec::new(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid(format!("{name} must be positive, got {v}"))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text).map_err(|source| ConfigError::Toml { path: path.to_path_buf(), source })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sentinels == 0 {
            return invalid("sentinels must be at least 1");
        }
        if self.devices.is_empty() && self.extra_devices.is_empty() {
            return invalid("at least one device is required");
        }
        positive("duration", self.duration)?;
        positive("block_interval", self.block_interval)?;
        positive("growth_bucket", self.growth_bucket)?;
        if self.seeds.is_empty() {
            return invalid("seeds must list at least one seed");
        }
        for extra in &self.extra_devices {
            if extra.sentinel >= self.sentinels {
                return invalid(format!("extra device on sentinel {} but only {} sentinels", extra.sentinel, self.sentinels));
            }
        }
        if !self.hash_weights.is_empty() {
            if self.hash_weights.len() != self.sentinels {
                return invalid("hash_weights must have one entry per sentinel");
            }
            for &w in &self.hash_weights {
                positive("hash weight", w)?;
            }
        }
        if self.pow.mode == PowMode::RealPow {
            let p = &self.pow;
            if !(1..=64).contains(&p.difficulty_bits) {
                return invalid("difficulty_bits must be in 1..=64");
            }
            if p.share_bits == 0 || p.share_bits > p.difficulty_bits {
                return invalid("share_bits must be in 1..=difficulty_bits");
            }
            positive("pow.tick", p.tick)?;
        }
        if let Some(a) = &self.attack {
            a.profile().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.topology(0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.protocol.profiling_duration < 0.0 || !self.protocol.profiling_duration.is_finite() {
            return invalid("profiling_duration must be non-negative");
        }
        positive("share_window_blocks", self.protocol.share_window_blocks)?;
        positive("shares_per_window", self.protocol.shares_per_window)?;
        positive("sync_timeout", self.protocol.sync_timeout)?;
        self.sentinel_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.resolve_traces()?;
        Ok(())
    }

    pub fn topology(&self, seed: u64) -> TopologyConfig {
        TopologyConfig {
            nodes: self.sentinels,
            adjacency: self.network.adjacency,
            latency_min_ms: self.network.latency_min_ms,
            latency_max_ms: self.network.latency_max_ms,
            loss: self.network.loss,
            seed,
        }
    }

    pub fn activity_window(&self) -> SimTime {
        SimTime::from_secs_f64(self.protocol.share_window_blocks * self.block_interval)
    }

    pub fn sentinel_config(&self) -> SentinelConfig {
        let p = &self.protocol;
        SentinelConfig {
            profiling_duration: SimTime::from_secs_f64(p.profiling_duration),
            adoption_margin: p.adoption_margin,
            confirmations: p.confirmations,
            prune_depth: p.prune_depth,
            activity_window: self.activity_window(),
            sync_timeout: SimTime::from_secs_f64(p.sync_timeout),
            sync_retries: p.sync_retries,
            relay: !matches!(self.network.adjacency, Adjacency::FullMesh),
            log_decisions: p.log_decisions,
            pow_mode: self.pow.mode,
            target: self.pow.target(),
            ..SentinelConfig::default()
        }
    }

    pub fn weight(&self, sentinel: usize) -> f64 {
        self.hash_weights.get(sentinel).copied().unwrap_or(1.0)
    }

    pub fn total_weight(&self) -> f64 {
        (0..self.sentinels).map(|i| self.weight(i)).sum()
    }

    /// Device labels per sentinel, in connection order.
    pub fn device_plan(&self) -> Vec<Vec<String>> {
        let mut plan = vec![self.devices.clone(); self.sentinels];
        for extra in &self.extra_devices {
            plan[extra.sentinel].push(extra.device.clone());
        }
        plan
    }

    /// Bundled traces plus trace files, checked against every label used.
    pub fn resolve_traces(&self) -> Result<BTreeMap<String, DeviceTrace>, ConfigError> {
        let mut traces: BTreeMap<String, DeviceTrace> = bundled_traces().into_iter().map(|t| (t.device_type.clone(), t)).collect();
        for src in &self.traces {
            let trace = load_trace_file(&src.path, &src.label, src.mean_interval)?;
            traces.insert(src.label.clone(), trace);
        }
        let used = self.devices.iter().chain(self.extra_devices.iter().map(|e| &e.device));
        for label in used.chain(self.attack.as_ref().and_then(|a| a.target.as_ref())) {
            if !traces.contains_key(label) {
                return Err(ConfigError::UnknownTrace(label.clone()));
            }
        }
        Ok(traces)
    }
}
