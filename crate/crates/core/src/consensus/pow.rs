use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha256, BlockHash};
use crate::ledger::{ControlBlock, PowMode, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowError {
    #[error("share target must exceed the block target")]
    ShareTargetTooLow,
    #[error("simulated block rate must be positive, got {0}")]
    BadRate(f64),
    #[error("hash weight must be positive, got {0}")]
    BadWeight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowContext {
    pub target: Target,
    /// Looser threshold for activity shares.
    pub share_target: Target,
    pub mode: PowMode,
    /// Expected blocks per simulated second per unit of hash weight.
    pub sim_rate: f64,
    pub hash_weight: f64,
}

impl PowContext {
    pub fn new(target: Target, share_target: Target, mode: PowMode, sim_rate: f64, hash_weight: f64) -> Result<Self, PowError> {
        let ctx = PowContext { target, share_target, mode, sim_rate, hash_weight };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<(), PowError> {
        if self.share_target <= self.target {
            return Err(PowError::ShareTargetTooLow);
        }
        if !(self.sim_rate > 0.0 && self.sim_rate.is_finite()) {
            return Err(PowError::BadRate(self.sim_rate));
        }
        if !(self.hash_weight > 0.0 && self.hash_weight.is_finite()) {
            return Err(PowError::BadWeight(self.hash_weight));
        }
        Ok(())
    }

    /// Expected shares per solved block, `share_target / target`.
    pub fn share_ratio(&self) -> f64 {
        self.share_target.to_f64() / self.target.to_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MineOutcome {
    Solved(u64),
    /// A partial solution: meets the share target but not the block target.
    Share(u64),
    /// Budget spent; scanning resumes at the carried nonce.
    Exhausted(u64),
}

/// Resumable nonce scan over one candidate. Each nonce is hashed at most once.
#[derive(Debug, Clone)]
pub struct Miner {
    template: Vec<u8>,
    nonce_offset: usize,
    next_nonce: u64,
    done: bool,
}

impl Miner {
    pub fn new(candidate: &ControlBlock) -> Self {
        Miner {
            template: candidate.encode(),
            nonce_offset: candidate.nonce_offset(),
            next_nonce: candidate.nonce,
            done: false,
        }
    }

    pub fn next_nonce(&self) -> u64 {
        self.next_nonce
    }

    fn hash_nonce(&mut self, nonce: u64) -> BlockHash {
        self.template[self.nonce_offset..self.nonce_offset + 8].copy_from_slice(&nonce.to_be_bytes());
        BlockHash(sha256(&self.template))
    }

    pub fn step(&mut self, ctx: &PowContext, nonce_budget: u64) -> MineOutcome {
        assert!(nonce_budget >= 1, "nonce budget must be at least 1");
        if self.done {
            return MineOutcome::Exhausted(self.next_nonce);
        }
        for _ in 0..nonce_budget {
            let nonce = self.next_nonce;
            let hash = self.hash_nonce(nonce);
            match nonce.checked_add(1) {
                Some(n) => self.next_nonce = n,
                None => self.done = true,
            }
            if ctx.target.is_met_by(&hash) {
                self.done = true;
                return MineOutcome::Solved(nonce);
            }
            if ctx.share_target.is_met_by(&hash) {
                return MineOutcome::Share(nonce);
            }
            if self.done {
                break;
            }
        }
        MineOutcome::Exhausted(self.next_nonce)
    }
}

/// One bounded scan from `candidate.nonce`. Use [`Miner`] to resume.
pub fn mine_step(candidate: &ControlBlock, ctx: &PowContext, nonce_budget: u64) -> MineOutcome {
    Miner::new(candidate).step(ctx, nonce_budget)
}

/// Mines until solved, returning the sealed block and how many shares were
/// found on the way.
pub fn mine_to_completion(candidate: &ControlBlock, ctx: &PowContext) -> (ControlBlock, Vec<u64>) {
    let mut miner = Miner::new(candidate);
    let mut shares = Vec::new();
    loop {
        match miner.step(ctx, 1 << 16) {
            MineOutcome::Solved(nonce) => {
                let mut sealed = candidate.clone();
                sealed.nonce = nonce;
                return (sealed, shares);
            }
            MineOutcome::Share(nonce) => shares.push(nonce),
            MineOutcome::Exhausted(_) => {
                assert!(!miner.done, "nonce space exhausted without a solution");
            }
        }
    }
}

/// Exponential waiting time for this node's next simulated solve, in seconds.
pub fn schedule_block_delay<R: Rng + ?Sized>(ctx: &PowContext, rng: &mut R) -> f64 {
    exp_sample(ctx.sim_rate * ctx.hash_weight, rng)
}

pub(crate) fn exp_sample<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    Exp::new(rate).expect("rate validated positive").sample(rng)
}
