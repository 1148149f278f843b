//! Block tree shared by the control chain and every device chain.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use super::block::{ControlBlock, WhitelistBlock};
use crate::digest::BlockHash;

pub trait ChainBlock: Clone {
    fn block_hash(&self) -> BlockHash;
    fn prev(&self) -> BlockHash;
}

impl ChainBlock for WhitelistBlock {
    fn block_hash(&self) -> BlockHash {
        self.hash()
    }
    fn prev(&self) -> BlockHash {
        self.prev_hash
    }
}

impl ChainBlock for ControlBlock {
    fn block_hash(&self) -> BlockHash {
        self.hash()
    }
    fn prev(&self) -> BlockHash {
        self.prev_hash
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum InsertError {
    #[error("block {0:?} already stored")]
    Duplicate(BlockHash),
    #[error("parent {0:?} unknown")]
    Orphan(BlockHash),
}

#[derive(Debug, Clone)]
pub struct TreeNode<B> {
    pub block: B,
    pub hash: BlockHash,
    /// Roots sit at height 0.
    pub height: u64,
    /// Local receipt order; the earlier block wins a height tie.
    pub receipt: u64,
    pub parent: Option<BlockHash>,
    pub children: Vec<BlockHash>,
}

impl<B> TreeNode<B> {
    /// Fork-choice ordering key: taller first, then first received.
    fn rank(&self) -> (u64, std::cmp::Reverse<u64>) {
        (self.height, std::cmp::Reverse(self.receipt))
    }
}

#[derive(Debug, Clone)]
pub struct BlockTree<B> {
    nodes: HashMap<BlockHash, TreeNode<B>>,
    /// Insertion order. Parents always precede children.
    order: Vec<BlockHash>,
}

impl<B> Default for BlockTree<B> {
    fn default() -> Self {
        BlockTree { nodes: HashMap::new(), order: Vec::new() }
    }
}

impl<B: ChainBlock> BlockTree<B> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a block whose parent is stored, or a root (zero prev hash).
    pub fn insert(&mut self, block: B, receipt: u64) -> Result<&TreeNode<B>, InsertError> {
        let hash = block.block_hash();
        if self.nodes.contains_key(&hash) {
            return Err(InsertError::Duplicate(hash));
        }
        let prev = block.prev();
        let (parent, height) = if prev == BlockHash::ZERO {
            (None, 0)
        } else {
            let parent = self.nodes.get_mut(&prev).ok_or(InsertError::Orphan(prev))?;
            parent.children.push(hash);
            (Some(prev), parent.height + 1)
        };
        self.order.push(hash);
        let node = TreeNode { block, hash, height, receipt, parent, children: Vec::new() };
        Ok(self.nodes.entry(hash).or_insert(node))
    }

    pub fn get(&self, hash: &BlockHash) -> Option<&TreeNode<B>> {
        self.nodes.get(hash)
    }

    pub fn contains(&self, hash: &BlockHash) -> bool {
        self.nodes.contains_key(hash)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &TreeNode<B>> {
        self.order.iter().map(move |h| &self.nodes[h])
    }

    /// Branch tips: nodes without children.
    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode<B>> {
        self.iter().filter(|n| n.children.is_empty())
    }

    /// Longest-chain rule: maximal height, ties to the first received.
    pub fn best_tip(&self) -> Option<&TreeNode<B>> {
        self.best_where(|_| true)
    }

    /// Best node among those accepted by `pred`.
    pub fn best_where(&self, pred: impl Fn(&TreeNode<B>) -> bool) -> Option<&TreeNode<B>> {
        self.nodes.values().filter(|n| pred(n)).max_by_key(|n| n.rank())
    }

    /// Evaluates `flag` on every node and ANDs it along each path from the
    /// root, so a node is marked only when it and all its ancestors are.
    pub fn path_flags(&self, flag: impl Fn(&TreeNode<B>) -> bool) -> HashMap<BlockHash, bool> {
        let mut out = HashMap::with_capacity(self.nodes.len());
        for node in self.iter() {
            let parent_ok = node.parent.map(|p| out[&p]).unwrap_or(true);
            out.insert(node.hash, parent_ok && flag(node));
        }
        out
    }

    /// Walks from `hash` back to its root, `hash` first.
    pub fn ancestry<'a>(&'a self, hash: &BlockHash) -> impl Iterator<Item = &'a TreeNode<B>> + 'a {
        let mut cursor = self.nodes.get(hash);
        std::iter::from_fn(move || {
            let node = cursor?;
            cursor = node.parent.and_then(|p| self.nodes.get(&p));
            Some(node)
        })
    }

    /// The ancestor `depth` blocks below `hash`, clamped at the root.
    pub fn ancestor_at_depth(&self, hash: &BlockHash, depth: u64) -> Option<BlockHash> {
        self.ancestry(hash).take(depth as usize + 1).last().map(|n| n.hash)
    }

    /// True when `ancestor` is `descendant` or lies on its path to the root.
    pub fn is_ancestor(&self, ancestor: &BlockHash, descendant: &BlockHash) -> bool {
        let Some(target) = self.nodes.get(ancestor) else { return false };
        self.ancestry(descendant)
            .take_while(|n| n.height >= target.height)
            .any(|n| n.hash == *ancestor)
    }

    /// Removes every branch whose tip is at least `depth` blocks behind the
    /// longest tip. Blocks on the path of a surviving or `protected` tip stay.
    pub fn prune(&mut self, depth: u64, protected: &[BlockHash]) -> usize {
        assert!(depth >= 1, "prune depth must be at least 1");
        let Some(best) = self.best_tip() else { return 0 };
        let best_height = best.height;
        let mut keep_roots: Vec<BlockHash> = self
            .leaves()
            .filter(|n| best_height - n.height < depth)
            .map(|n| n.hash)
            .collect();
        keep_roots.extend(protected.iter().filter(|h| self.nodes.contains_key(h)));

        let mut keep: HashSet<BlockHash> = HashSet::new();
        for tip in keep_roots {
            for node in self.ancestry(&tip) {
                if !keep.insert(node.hash) {
                    break;
                }
            }
        }
        let before = self.nodes.len();
        self.nodes.retain(|h, _| keep.contains(h));
        self.order.retain(|h| keep.contains(h));
        for node in self.nodes.values_mut() {
            node.children.retain(|c| keep.contains(c));
        }
        before - self.nodes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::{ChainId, PacketSignature, SentinelAddress};
    use crate::time::SimTime;

    fn block(prev: BlockHash, tag: u8) -> WhitelistBlock {
        WhitelistBlock {
            prev_hash: prev,
            chain_id: ChainId::ZERO,
            sentinel_address: SentinelAddress([tag; 32]),
            timestamp: SimTime(tag as u64),
            signatures: vec![PacketSignature([tag; 32])],
        }
    }

    /// Builds a linear branch of `len` blocks on `from`; returns the tip.
    fn extend(tree: &mut BlockTree<WhitelistBlock>, from: BlockHash, len: u8, tag: u8, receipt: &mut u64) -> BlockHash {
        let mut tip = from;
        for i in 0..len {
            let b = block(tip, tag.wrapping_mul(31).wrapping_add(i));
            *receipt += 1;
            tip = tree.insert(b, *receipt).unwrap().hash;
        }
        tip
    }

    #[test]
    fn insert_rejects_orphans_and_duplicates() {
        let mut tree = BlockTree::new();
        let g = block(BlockHash::ZERO, 0);
        let gh = tree.insert(g.clone(), 0).unwrap().hash;
        assert_eq!(tree.insert(g, 1).unwrap_err(), InsertError::Duplicate(gh));
        let orphan = block(BlockHash([9; 32]), 1);
        assert_eq!(tree.insert(orphan, 2).unwrap_err(), InsertError::Orphan(BlockHash([9; 32])));
        assert_eq!(tree.len(), 1);
    }

    #[test]
    fn longest_then_first_received() {
        let mut tree = BlockTree::new();
        let mut r = 0;
        let g = tree.insert(block(BlockHash::ZERO, 0), 0).unwrap().hash;
        let a = extend(&mut tree, g, 5, 1, &mut r);
        assert_eq!(tree.best_tip().unwrap().hash, a);
        let b = extend(&mut tree, g, 5, 2, &mut r);
        // equal height: A arrived first and keeps the lead
        assert_eq!(tree.best_tip().unwrap().hash, a);
        let b6 = extend(&mut tree, b, 1, 3, &mut r);
        assert_eq!(tree.best_tip().unwrap().hash, b6);
        let c = extend(&mut tree, g, 7, 4, &mut r);
        assert_eq!(tree.best_tip().unwrap().height, 7);
        assert_eq!(tree.best_tip().unwrap().hash, c);
    }

    #[test]
    fn ancestry_helpers() {
        let mut tree = BlockTree::new();
        let mut r = 0;
        let g = tree.insert(block(BlockHash::ZERO, 0), 0).unwrap().hash;
        let tip = extend(&mut tree, g, 4, 1, &mut r);
        assert_eq!(tree.ancestry(&tip).count(), 5);
        assert_eq!(tree.ancestor_at_depth(&tip, 0), Some(tip));
        assert_eq!(tree.ancestor_at_depth(&tip, 4), Some(g));
        assert_eq!(tree.ancestor_at_depth(&tip, 40), Some(g));
        assert!(tree.is_ancestor(&g, &tip));
        assert!(!tree.is_ancestor(&tip, &g));
        let side = extend(&mut tree, g, 1, 9, &mut r);
        assert!(!tree.is_ancestor(&side, &tip));
    }

    #[test]
    fn prune_forks() {
        let mut tree = BlockTree::new();
        let mut r = 0;
        let g = tree.insert(block(BlockHash::ZERO, 0), 0).unwrap().hash;
        let main = extend(&mut tree, g, 6, 1, &mut r);
        assert_eq!(tree.prune(2, &[]), 0);
        let fork_base = tree.ancestor_at_depth(&main, 4).unwrap();
        let fork = extend(&mut tree, fork_base, 1, 2, &mut r); // height 3, 3 behind
        assert_eq!(tree.prune(4, &[]), 0);
        assert_eq!(tree.prune(2, &[fork]), 0);
        assert_eq!(tree.prune(2, &[]), 1);
        assert!(!tree.contains(&fork));
        assert_eq!(tree.best_tip().unwrap().hash, main);
        assert!(tree.get(&fork_base).unwrap().children.len() == 1);
    }
}
