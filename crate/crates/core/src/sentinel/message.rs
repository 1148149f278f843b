use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::digest::{BlockHash, ChainId, PacketSignature};
use crate::ledger::{ControlBlock, RejectReason, WhitelistBlock};
use crate::time::SimTime;

/// Index of a sentinel in the simulated network.
pub type PeerId = usize;

/// Wire messages between sentinels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    /// A freshly mined control block with the whitelist blocks it lists.
    Announce { control: ControlBlock, whitelist: Vec<WhitelistBlock> },
    /// Partial proof-of-work solution, the activity heartbeat.
    Share { nonce: u64 },
    SyncRequest { request: u64, chain_id: ChainId },
    SyncResponse {
        request: u64,
        chain_id: ChainId,
        control: Vec<ControlBlock>,
        whitelist: Vec<WhitelistBlock>,
    },
    /// Ask for a missing parent and the blocks below it.
    GetBlocks { control: Option<BlockHash>, whitelist: Option<(ChainId, BlockHash)> },
    Blocks { control: Vec<ControlBlock>, whitelist: Vec<WhitelistBlock> },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Announce { .. } => "announce",
            Message::Share { .. } => "share",
            Message::SyncRequest { .. } => "sync_request",
            Message::SyncResponse { .. } => "sync_response",
            Message::GetBlocks { .. } => "get_blocks",
            Message::Blocks { .. } => "blocks",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "timer", rename_all = "snake_case")]
pub enum Timer {
    ProfilingDone { device: String },
    SyncTimeout { request: u64 },
}

/// What a sentinel asks its environment to do.
#[derive(Debug, Clone)]
pub enum Action {
    Send { to: PeerId, msg: Arc<Message> },
    Broadcast { to: Vec<PeerId>, msg: Arc<Message> },
    SetTimer { at: SimTime, timer: Timer },
    /// First subscription made; the node now takes part in the mining race.
    StartMining,
    /// A locally created genesis, public from the moment it exists.
    Genesis(WhitelistBlock),
    Log(SentinelEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Forward,
    Drop,
    ProfilePass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterDecision {
    pub verdict: Verdict,
    pub signature: PacketSignature,
    pub reason: &'static str,
}

/// Structured log line payload; the environment adds time and node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SentinelEvent {
    Subscribed { device: String, chain: ChainId, created: bool },
    ProfilingHeld { device: String },
    Decision { device: String, verdict: Verdict, signature: PacketSignature },
    SignatureObserved { device: String, chain: ChainId, signature: PacketSignature },
    BlockAccepted { chain: ChainId, hash: BlockHash, height: u64 },
    /// Stored as a foreign branch, not extended.
    BlockRejected { chain: ChainId, hash: BlockHash, height: u64, unrecognized: Vec<PacketSignature> },
    BlockDiscarded { chain: ChainId, hash: BlockHash, reason: String },
    ControlRejected { hash: BlockHash, reasons: Vec<RejectReason> },
    Reorg { chain: ChainId, from: BlockHash, to: BlockHash },
    Adopted { chain: ChainId, tip: BlockHash, signatures: Vec<PacketSignature> },
    WhitelistChanged { chain: ChainId, added: Vec<PacketSignature>, removed: Vec<PacketSignature> },
    Mined { control: BlockHash, height: u64, headers: Vec<BlockHash> },
    SyncGaveUp { chain: ChainId },
}
