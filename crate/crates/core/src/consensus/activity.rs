use std::collections::{BTreeMap, VecDeque};

use crate::time::SimTime;

/// Recent shares per peer. A peer is active while it has a share that is
/// younger than the window.
#[derive(Debug, Clone)]
pub struct ActivityLedger<P: Ord> {
    window: SimTime,
    shares: BTreeMap<P, VecDeque<SimTime>>,
}

impl<P: Ord + Clone> ActivityLedger<P> {
    pub fn new(window: SimTime) -> Self {
        ActivityLedger { window, shares: BTreeMap::new() }
    }

    pub fn window(&self) -> SimTime {
        self.window
    }

    pub fn record_share(&mut self, peer: P, received: SimTime) {
        let entries = self.shares.entry(peer).or_default();
        // keep per-peer order even if a caller hands us a late timestamp
        let at = entries.back().map_or(received, |&last| last.max(received));
        entries.push_back(at);
        while entries.len() > 1 && entries.front().is_some_and(|&t| at.saturating_sub(t) > self.window) {
            entries.pop_front();
        }
    }

    pub fn is_peer_active(&self, peer: &P, now: SimTime) -> bool {
        self.last_share(peer).is_some_and(|t| t <= now && now.saturating_sub(t) <= self.window)
    }

    pub fn last_share(&self, peer: &P) -> Option<SimTime> {
        self.shares.get(peer).and_then(|e| e.back().copied())
    }
}
