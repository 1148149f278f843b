//! Blockchain-backed packet whitelisting for IoT device traffic.

pub mod consensus;
pub mod devsim;
pub mod digest;
pub mod harness;
pub mod ledger;
pub mod netsim;
pub mod sentinel;
pub mod sigcore;
pub mod time;

pub use digest::{BlockHash, ChainId, DeviceFingerprint, PacketSignature, SentinelAddress};
pub use harness::{run_experiment, ExperimentConfig, MetricsReport};
pub use ledger::{BlockArchive, ChainStore, ControlBlock, PowMode, Target, WhitelistBlock};
pub use sentinel::{SentinelConfig, SentinelState, Verdict};
pub use sigcore::{compute_fingerprint, compute_signature, PacketRecord};
pub use time::SimTime;
