use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use herdwall_core::consensus::{mine_step, mine_to_completion, schedule_block_delay, MineOutcome, PowContext};
use herdwall_core::digest::{BlockHash, SentinelAddress};
use herdwall_core::ledger::{validate_control_block, ChainStore, ControlBlock, PowMode, Target};
use herdwall_core::time::SimTime;

fn candidate(seed: u64, headers: usize, target: Target) -> ControlBlock {
    ControlBlock {
        prev_hash: ControlBlock::genesis().hash(),
        timestamp: SimTime::from_secs(seed % 1_000_000),
        sentinel_address: SentinelAddress([seed as u8; 32]),
        whitelist_headers: (0..headers).map(|i| BlockHash([i as u8 ^ seed as u8; 32])).collect(),
        nonce: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        target,
    }
}

fn real(target_bits: u32, share_bits: u32) -> PowContext {
    PowContext::new(Target::pow2(target_bits), Target::pow2(share_bits), PowMode::RealPow, 1.0, 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solved_nonces_validate(seed in any::<u64>(), headers in 0usize..4) {
        let ctx = real(248, 252);
        let (sealed, _) = mine_to_completion(&candidate(seed, headers, ctx.target), &ctx);
        let store = ChainStore::new(ctx.target);
        prop_assert!(validate_control_block(&sealed, &store, PowMode::RealPow).is_valid());
    }

    #[test]
    fn shares_meet_share_target_only(seed in any::<u64>()) {
        let ctx = real(246, 252);
        let mut block = candidate(seed, 1, ctx.target);
        for _ in 0..20 {
            match mine_step(&block, &ctx, 1 << 12) {
                MineOutcome::Share(n) => {
                    let mut b = block.clone();
                    b.nonce = n;
                    prop_assert!(ctx.share_target.is_met_by(&b.hash()));
                    prop_assert!(!ctx.target.is_met_by(&b.hash()));
                    block.nonce = n + 1;
                }
                MineOutcome::Solved(_) => break,
                MineOutcome::Exhausted(n) => block.nonce = n,
            }
        }
    }
}

/// Attempts per solve are geometric with mean 2^16 at target 2^240.
#[test]
fn attempts_match_the_geometric_mean() {
    let ctx = real(240, 244);
    let mut total = 0u64;
    for i in 0..50 {
        let mut block = candidate(i, 2, ctx.target);
        block.nonce = 0;
        let (sealed, _) = mine_to_completion(&block, &ctx);
        total += sealed.nonce + 1;
    }
    let mean = total as f64 / 50.0;
    let expected = ctx.target.expected_attempts();
    assert!(mean > expected / 3.0 && mean < expected * 3.0, "mean {mean} vs {expected}");
}

fn race(weights: &[f64], rounds: usize, seed: u64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let ctxs: Vec<PowContext> = weights
        .iter()
        .map(|&w| PowContext { target: Target::MAX, share_target: Target::MAX, mode: PowMode::Simulated, sim_rate: 1.0 / (20.0 * total), hash_weight: w })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = vec![0; weights.len()];
    for _ in 0..rounds {
        let (winner, _) = ctxs
            .iter()
            .map(|c| schedule_block_delay(c, &mut rng))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        wins[winner] += 1;
    }
    wins
}

#[test]
fn win_frequency_tracks_hash_weight() {
    let weights = [1.0, 2.0, 3.0, 4.0];
    let rounds = 40_000;
    let wins = race(&weights, rounds, 11);
    let total: f64 = weights.iter().sum();
    for (w, n) in weights.iter().zip(&wins) {
        let expected = w / total * rounds as f64;
        assert!((*n as f64 - expected).abs() / expected < 0.10, "weight {w}: {n} vs {expected}");
    }
}

#[test]
fn equal_weights_win_uniformly() {
    let nodes = 1000;
    let rounds = 100_000;
    let wins = race(&vec![1.0; nodes], rounds, 3);
    let expected = rounds as f64 / nodes as f64;
    let chi2: f64 = wins.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
    // 999 degrees of freedom: the 0.999 quantile is about 1143
    assert!(chi2 < 1143.0, "chi-square {chi2}");
}
