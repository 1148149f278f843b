//! Per-node protocol state machine: profiling, packet filtering, candidate
//! building, block acceptance and chain convergence.

pub mod message;
pub mod state;

pub use message::{Action, FilterDecision, Message, PeerId, SentinelEvent, Timer, Verdict};
pub use state::{
    sentinel_address_new, DeviceCounters, Phase, RoundCandidates, SentinelConfig, SentinelError, SentinelState,
};

#[cfg(test)]
mod tests;
