//! Proof-of-work block production, real or simulated, and the activity
//! shares that keep a sentinel on its neighbours' forwarding lists.

pub mod activity;
pub mod pow;

pub use activity::ActivityLedger;
pub use pow::{mine_step, mine_to_completion, schedule_block_delay, MineOutcome, Miner, PowContext, PowError};
