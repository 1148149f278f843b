use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;

use herdwall_core::digest::{BlockHash, PacketSignature, SentinelAddress};
use herdwall_core::ledger::{
    validate_whitelist_block, whitelist_at, ChainStore, ControlBlock, Target, Validity, WhitelistBlock, WhitelistCache,
};
use herdwall_core::sigcore::compute_fingerprint;
use herdwall_core::time::SimTime;

#[derive(Debug, Clone)]
enum Op {
    /// Extend the block at `parent % len` with signatures from the pool.
    Extend { parent: usize, sigs: Vec<u8> },
    /// Mine a control block at `parent % len` of the control tree listing the
    /// headers of whitelist blocks `picks`.
    Control { parent: usize, picks: Vec<usize> },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (any::<usize>(), prop::collection::vec(0u8..10, 0..3)).prop_map(|(parent, sigs)| Op::Extend { parent, sigs }),
        2 => (any::<usize>(), prop::collection::vec(any::<usize>(), 0..3)).prop_map(|(parent, picks)| Op::Control { parent, picks }),
    ]
}

fn sig(i: u8) -> PacketSignature {
    PacketSignature([i; 32])
}

struct Replay {
    store: ChainStore,
    whitelist: Vec<WhitelistBlock>,
    control: Vec<ControlBlock>,
}

impl Replay {
    fn new() -> Self {
        let genesis_sigs = [sig(100), sig(101)];
        let chain = compute_fingerprint(&genesis_sigs).unwrap();
        let genesis = WhitelistBlock::genesis(chain, genesis_sigs);
        let mut store = ChainStore::new(Target::MAX);
        store.insert_whitelist(genesis.clone()).unwrap();
        Replay { store, whitelist: vec![genesis], control: vec![ControlBlock::genesis()] }
    }

    fn chain(&self) -> herdwall_core::digest::ChainId {
        self.whitelist[0].chain_id
    }

    fn apply(&mut self, step: usize, op: &Op) {
        match op {
            Op::Extend { parent, sigs } => {
                let parent = self.whitelist[parent % self.whitelist.len()].hash();
                let mut signatures: Vec<_> = sigs.iter().map(|&i| sig(i)).collect();
                signatures.sort();
                signatures.dedup();
                let block = WhitelistBlock {
                    prev_hash: parent,
                    chain_id: self.chain(),
                    sentinel_address: SentinelAddress::ZERO,
                    timestamp: SimTime::from_secs(step as u64 + 1),
                    signatures,
                };
                if self.store.insert_whitelist(block.clone()).is_ok() {
                    self.whitelist.push(block);
                }
            }
            Op::Control { parent, picks } => {
                let parent = self.control[parent % self.control.len()].hash();
                let mut headers: Vec<BlockHash> = picks.iter().map(|p| self.whitelist[p % self.whitelist.len()].hash()).collect();
                headers.sort();
                headers.dedup();
                let block = ControlBlock {
                    prev_hash: parent,
                    timestamp: SimTime::from_secs(step as u64 + 1),
                    sentinel_address: SentinelAddress::ZERO,
                    whitelist_headers: headers,
                    nonce: step as u64,
                    target: Target::MAX,
                };
                if self.store.insert_control(block.clone()).is_ok() {
                    self.control.push(block);
                }
            }
        }
    }

    fn longest_control_headers(&self) -> BTreeSet<BlockHash> {
        self.store
            .control()
            .ancestry(&self.store.control_tip())
            .flat_map(|n| n.block.whitelist_headers.iter().copied())
            .collect()
    }
}

fn brute_union(blocks: &[WhitelistBlock], tip: BlockHash) -> BTreeSet<PacketSignature> {
    let by_hash: HashMap<BlockHash, &WhitelistBlock> = blocks.iter().map(|b| (b.hash(), b)).collect();
    let mut out = BTreeSet::new();
    let mut cur = Some(tip);
    while let Some(h) = cur {
        let b = by_hash[&h];
        out.extend(b.signatures.iter().copied());
        cur = (!b.is_genesis()).then_some(b.prev_hash);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn valid_blocks_never_turn_invalid(ops in prop::collection::vec(op(), 1..60)) {
        let mut r = Replay::new();
        let mut seen_valid: BTreeSet<BlockHash> = BTreeSet::new();
        for (i, op) in ops.iter().enumerate() {
            r.apply(i, op);
            for b in &r.whitelist {
                match validate_whitelist_block(b, &r.store) {
                    Validity::Valid => { seen_valid.insert(b.hash()); }
                    Validity::Invalid(reasons) => prop_assert!(!seen_valid.contains(&b.hash()), "valid block went invalid: {:?}", reasons),
                    Validity::Pending => {}
                }
            }
        }
    }

    #[test]
    fn valid_blocks_are_anchored_on_the_longest_control_chain(ops in prop::collection::vec(op(), 1..60)) {
        let mut r = Replay::new();
        for (i, op) in ops.iter().enumerate() {
            r.apply(i, op);
        }
        let headers = r.longest_control_headers();
        for b in &r.whitelist {
            if validate_whitelist_block(b, &r.store) == Validity::Valid && !b.is_genesis() {
                prop_assert!(headers.contains(&b.hash()));
            }
        }
    }

    #[test]
    fn extending_a_branch_never_shrinks_its_whitelist(ops in prop::collection::vec(op(), 1..60)) {
        let mut r = Replay::new();
        for (i, op) in ops.iter().enumerate() {
            r.apply(i, op);
        }
        let tree = r.store.device_tree(&r.chain()).unwrap();
        for node in tree.iter() {
            if let Some(parent) = node.parent {
                let here = whitelist_at(tree, &node.hash);
                prop_assert!(whitelist_at(tree, &parent).is_subset(&here));
            }
        }
    }

    #[test]
    fn cached_whitelist_matches_brute_force_through_reorgs(ops in prop::collection::vec(op(), 1..60)) {
        let mut r = Replay::new();
        let mut cache = WhitelistCache::default();
        for (i, op) in ops.iter().enumerate() {
            r.apply(i, op);
            let tip = r.store.resolve_fork(&r.chain()).unwrap();
            cache.update(r.store.device_tree(&r.chain()).unwrap(), tip);
            prop_assert_eq!(cache.allowed(), &brute_union(&r.whitelist, tip));
            prop_assert_eq!(&r.store.derive_whitelist(&r.chain()).unwrap().allowed, cache.allowed());
        }
    }
}
