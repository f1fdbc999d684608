use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{LookupRequest, PeerOverlayState, SemanticCluster};
use crate::model::PeerId;

/// Bounded FIFO of query ids this peer has already handled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeenCache {
    capacity: usize,
    order: VecDeque<u64>,
    set: BTreeSet<u64>,
}

impl SeenCache {
    pub fn new(capacity: usize) -> Self {
        SeenCache {
            capacity: capacity.max(1),
            order: VecDeque::new(),
            set: BTreeSet::new(),
        }
    }

    pub fn contains(&self, id: u64) -> bool {
        self.set.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Records `id`; false if it was already present.
    pub fn insert(&mut self, id: u64) -> bool {
        if !self.set.insert(id) {
            return false;
        }
        self.order.push_back(id);
        if self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.set.remove(&old);
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloodStep {
    /// The request was already seen and has been dropped.
    pub duplicate: bool,
    pub forwards: Vec<(PeerId, LookupRequest)>,
}

/// Handles one incoming lookup at a peer: drop duplicates, otherwise
/// evaluate locally and forward with `ttl - 1` to every neighbour in the
/// request's cluster except the sender, provided budget remains.
pub fn flood_step(state: &mut PeerOverlayState, req: &LookupRequest, from: Option<PeerId>) -> FloodStep {
    if !state.seen.insert(req.query_id) {
        return FloodStep {
            duplicate: true,
            forwards: Vec::new(),
        };
    }
    let mut forwards = Vec::new();
    if req.ttl > 1 {
        if let Some(neigh) = state.neighbors.get(&req.cluster_key()) {
            let next = LookupRequest {
                ttl: req.ttl - 1,
                ..req.clone()
            };
            forwards.extend(neigh.iter().filter(|n| Some(**n) != from).map(|n| (*n, next.clone())));
        }
    }
    FloodStep {
        duplicate: false,
        forwards,
    }
}

/// Peers within `ttl - 1` hops of `entry` (entry included when `ttl >= 1`).
pub fn bfs_reachable_in(adjacency: &BTreeMap<PeerId, BTreeSet<PeerId>>, entry: PeerId, ttl: u32) -> BTreeSet<PeerId> {
    let mut seen = BTreeSet::new();
    if ttl == 0 {
        return seen;
    }
    seen.insert(entry);
    let mut frontier = vec![entry];
    let mut depth = 0;
    while !frontier.is_empty() && depth + 1 < ttl {
        let mut next = Vec::new();
        for p in frontier {
            for n in adjacency.get(&p).into_iter().flatten() {
                if seen.insert(*n) {
                    next.push(*n);
                }
            }
        }
        frontier = next;
        depth += 1;
    }
    seen
}

pub fn bfs_reachable(cluster: &SemanticCluster, entry: PeerId, ttl: u32) -> BTreeSet<PeerId> {
    bfs_reachable_in(&cluster.adjacency, entry, ttl)
}
