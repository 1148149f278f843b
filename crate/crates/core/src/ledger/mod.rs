//! Multichain ledger: one proof-of-work control chain anchoring the header
//! hashes of many device chains.

pub mod block;
pub mod export;
pub mod store;
pub mod tree;

pub use block::{control_hash, header_hash, ControlBlock, Target, WhitelistBlock, CONTROL_BASE_LEN, WHITELIST_BASE_LEN};
pub use export::{BlockArchive, ExportError};
pub use store::{
    is_self_certified_genesis, validate_control_block, validate_whitelist_block, whitelist_at, ChainStore,
    ControlUpdate, LedgerError, PowMode, RejectReason, Validity, Whitelist, WhitelistCache, WhitelistDelta,
};
pub use tree::{BlockTree, ChainBlock, InsertError, TreeNode};
