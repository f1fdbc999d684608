//! Semantic P2P layer.
//!
//! Every context domain owns a [`DomainRing`]: position 0 is the domain's
//! CSG, followed by one [`SemanticCluster`] per global attribute in schema
//! creation order. A cluster is an unstructured peer graph of the gateways
//! that provide that attribute; lookups entering a cluster are flooded
//! Gnutella-0.4 style, with a hop budget and per-peer duplicate suppression.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GlobalSchema, PeerId, Predicate};

mod flood;

pub use flood::{bfs_reachable, bfs_reachable_in, flood_step, FloodStep, SeenCache};

pub const DEFAULT_DEGREE: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterKey {
    pub domain: String,
    pub attribute: String,
}

impl ClusterKey {
    pub fn new(domain: impl Into<String>, attribute: impl Into<String>) -> Self {
        ClusterKey {
            domain: domain.into(),
            attribute: attribute.into(),
        }
    }
}

impl fmt::Display for ClusterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.domain, self.attribute)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticCluster {
    pub attribute: String,
    pub members: BTreeSet<PeerId>,
    pub head: Option<PeerId>,
    pub adjacency: BTreeMap<PeerId, BTreeSet<PeerId>>,
}

impl SemanticCluster {
    pub fn new(attribute: impl Into<String>) -> Self {
        SemanticCluster {
            attribute: attribute.into(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn neighbors(&self, peer: PeerId) -> impl Iterator<Item = PeerId> + '_ {
        self.adjacency.get(&peer).into_iter().flatten().copied()
    }

    pub fn degree(&self, peer: PeerId) -> usize {
        self.adjacency.get(&peer).map_or(0, BTreeSet::len)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Adds `peer`, linking it to `min(degree, |members|)` uniformly sampled
    /// existing members. Returns the chosen neighbours, or `None` if the peer
    /// was already a member.
    pub fn add<R: Rng + ?Sized>(&mut self, peer: PeerId, degree: usize, rng: &mut R) -> Option<Vec<PeerId>> {
        if self.members.contains(&peer) {
            return None;
        }
        let existing: Vec<PeerId> = self.members.iter().copied().collect();
        let k = degree.min(existing.len());
        let mut chosen: Vec<PeerId> = sample(rng, existing.len(), k).into_iter().map(|i| existing[i]).collect();
        chosen.sort();
        self.members.insert(peer);
        let links = self.adjacency.entry(peer).or_default();
        links.extend(chosen.iter().copied());
        for n in &chosen {
            self.adjacency.entry(*n).or_default().insert(peer);
        }
        if self.head.is_none() {
            self.head = Some(peer);
        }
        Some(chosen)
    }

    /// Removes `peer` and its edges. Returns `Some(new_head)` when the head
    /// changed (the lowest remaining id takes over).
    pub fn remove(&mut self, peer: PeerId) -> Option<Option<PeerId>> {
        if !self.members.remove(&peer) {
            return None;
        }
        if let Some(links) = self.adjacency.remove(&peer) {
            for n in links {
                if let Some(set) = self.adjacency.get_mut(&n) {
                    set.remove(&peer);
                }
            }
        }
        if self.head == Some(peer) {
            self.head = self.members.iter().next().copied();
            Some(self.head)
        } else {
            Some(self.head)
        }
    }

    /// Drops a single edge (one side noticed the other is gone).
    pub fn unlink(&mut self, a: PeerId, b: PeerId) {
        if let Some(s) = self.adjacency.get_mut(&a) {
            s.remove(&b);
        }
        if let Some(s) = self.adjacency.get_mut(&b) {
            s.remove(&a);
        }
    }

    /// Connected components of the neighbour graph, each sorted; ordered by
    /// their smallest member.
    pub fn components(&self) -> Vec<BTreeSet<PeerId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in &self.members {
            if seen.contains(&start) {
                continue;
            }
            let reach = bfs_reachable_in(&self.adjacency, start, u32::MAX);
            seen.extend(reach.iter().copied());
            out.push(reach);
        }
        out
    }

    /// Checks symmetry, no self loops, neighbours ⊆ members and head ∈ members.
    pub fn check_invariants(&self) -> Result<(), String> {
        match (self.head, self.members.is_empty()) {
            (None, false) => return Err(format!("{}: no head", self.attribute)),
            (Some(h), _) if !self.members.contains(&h) => {
                return Err(format!("{}: head {h} not a member", self.attribute))
            }
            _ => {}
        }
        for (p, links) in &self.adjacency {
            if !self.members.contains(p) {
                return Err(format!("{}: adjacency for non-member {p}", self.attribute));
            }
            for n in links {
                if n == p {
                    return Err(format!("{}: self loop at {p}", self.attribute));
                }
                if !self.members.contains(n) {
                    return Err(format!("{}: {p} links to non-member {n}", self.attribute));
                }
                if !self.adjacency.get(n).is_some_and(|s| s.contains(p)) {
                    return Err(format!("{}: asymmetric edge {p}->{n}", self.attribute));
                }
            }
        }
        Ok(())
    }
}

/// The CSG: entry point of a ring and keeper of its directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsgState {
    pub domain: String,
    /// attribute → current cluster head
    pub directory: BTreeMap<String, Option<PeerId>>,
    /// Attributes whose clusters this CSG spawned, in order.
    pub generation_log: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RingNode {
    Csg,
    Cluster(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRing {
    pub domain: String,
    pub csg: CsgState,
    /// Ring positions 1..=n; position 0 is the CSG.
    pub clusters: Vec<SemanticCluster>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverlayError {
    #[error("no cluster for {0}")]
    UnknownCluster(ClusterKey),
    #[error("no cluster on the {domain} ring serves any of {projection:?}")]
    EmptyEntry { domain: String, projection: Vec<String> },
}

impl DomainRing {
    pub fn new(domain: impl Into<String>) -> Self {
        let domain = domain.into();
        DomainRing {
            csg: CsgState {
                domain: domain.clone(),
                directory: BTreeMap::new(),
                generation_log: Vec::new(),
            },
            domain,
            clusters: Vec::new(),
        }
    }

    pub fn position(&self, attribute: &str) -> Option<usize> {
        self.clusters.iter().position(|c| c.attribute == attribute)
    }

    pub fn cluster(&self, attribute: &str) -> Option<&SemanticCluster> {
        self.clusters.iter().find(|c| c.attribute == attribute)
    }

    pub fn cluster_mut(&mut self, attribute: &str) -> Option<&mut SemanticCluster> {
        self.clusters.iter_mut().find(|c| c.attribute == attribute)
    }

    pub fn key(&self, attribute: &str) -> ClusterKey {
        ClusterKey::new(self.domain.clone(), attribute)
    }

    /// Appends a cluster for each schema attribute the ring lacks; existing
    /// positions never move. Returns the new attributes.
    pub fn sync(&mut self, schema: &GlobalSchema) -> Vec<String> {
        let mut added = Vec::new();
        for attr in &schema.attributes {
            if self.position(&attr.name).is_none() {
                self.clusters.push(SemanticCluster::new(attr.name.clone()));
                self.csg.directory.insert(attr.name.clone(), None);
                self.csg.generation_log.push(attr.name.clone());
                added.push(attr.name.clone());
            }
        }
        added
    }

    /// Ring links between consecutive positions, closing back to the CSG.
    pub fn links(&self) -> Vec<(RingNode, RingNode)> {
        let n = self.clusters.len() + 1;
        let node = |i: usize| if i == 0 { RingNode::Csg } else { RingNode::Cluster(i - 1) };
        if n == 1 {
            return Vec::new();
        }
        (0..n).map(|i| (node(i), node((i + 1) % n))).collect()
    }

    fn refresh_directory(&mut self, attribute: &str) {
        let head = self.cluster(attribute).and_then(|c| c.head);
        self.csg.directory.insert(attribute.to_string(), head);
    }

    pub fn members(&self) -> BTreeSet<PeerId> {
        self.clusters.iter().flat_map(|c| c.members.iter().copied()).collect()
    }

    pub fn clusters_of(&self, peer: PeerId) -> Vec<&str> {
        self.clusters
            .iter()
            .filter(|c| c.members.contains(&peer))
            .map(|c| c.attribute.as_str())
            .collect()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let attrs: BTreeSet<&str> = self.clusters.iter().map(|c| c.attribute.as_str()).collect();
        if attrs.len() != self.clusters.len() {
            return Err(format!("{}: duplicate cluster attribute", self.domain));
        }
        let keys: BTreeSet<&str> = self.csg.directory.keys().map(String::as_str).collect();
        if keys != attrs {
            return Err(format!("{}: CSG directory out of sync", self.domain));
        }
        for c in &self.clusters {
            c.check_invariants()?;
            if self.csg.directory[&c.attribute] != c.head {
                return Err(format!("{}: directory head stale for {}", self.domain, c.attribute));
            }
        }
        Ok(())
    }
}

/// Creates the ring on first use and grows it as the schema evolves.
pub fn ensure_ring<'a>(rings: &'a mut BTreeMap<String, DomainRing>, schema: &GlobalSchema) -> &'a mut DomainRing {
    let ring = rings
        .entry(schema.domain_name.clone())
        .or_insert_with(|| DomainRing::new(schema.domain_name.clone()));
    ring.sync(schema);
    ring
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterJoin {
    pub attribute: String,
    pub head: PeerId,
    pub neighbors: Vec<PeerId>,
}

/// Joins `peer` to exactly the clusters named in `attrs` (global names).
/// Re-joining a cluster the peer is already in is a no-op and is omitted
/// from the report.
pub fn join<R: Rng + ?Sized>(
    ring: &mut DomainRing,
    peer: PeerId,
    attrs: &[String],
    degree: usize,
    rng: &mut R,
) -> Result<Vec<ClusterJoin>, OverlayError> {
    if let Some(missing) = attrs.iter().find(|a| ring.position(a).is_none()) {
        return Err(OverlayError::UnknownCluster(ring.key(missing)));
    }
    let mut out = Vec::new();
    for attr in attrs {
        let cluster = ring.cluster_mut(attr).expect("checked above");
        if let Some(neighbors) = cluster.add(peer, degree, rng) {
            let head = cluster.head.expect("non-empty cluster");
            ring.refresh_directory(attr);
            out.push(ClusterJoin {
                attribute: attr.clone(),
                head,
                neighbors,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaveReport {
    pub left: Vec<String>,
    /// Clusters whose head changed, with the replacement.
    pub new_heads: Vec<(String, Option<PeerId>)>,
}

/// Purges `peer` from the given clusters (all of them when `only` is None).
pub fn leave(ring: &mut DomainRing, peer: PeerId, only: Option<&[String]>) -> LeaveReport {
    let mut report = LeaveReport::default();
    let targets: Vec<String> = ring
        .clusters
        .iter()
        .filter(|c| only.is_none_or(|o| o.contains(&c.attribute)))
        .map(|c| c.attribute.clone())
        .collect();
    for attr in targets {
        let cluster = ring.cluster_mut(&attr).expect("listed above");
        let was_head = cluster.head == Some(peer);
        if let Some(head) = cluster.remove(peer) {
            report.left.push(attr.clone());
            if was_head {
                report.new_heads.push((attr.clone(), head));
            }
            ring.refresh_directory(&attr);
        }
    }
    report
}

/// Decides the entry cluster for a lookup: walking the ring from the CSG,
/// the first non-empty cluster whose attribute is projected.
pub fn route_to_entry<'a>(ring: &'a DomainRing, projection: &[String]) -> Result<&'a SemanticCluster, OverlayError> {
    ring.clusters
        .iter()
        .find(|c| projection.contains(&c.attribute) && c.head.is_some())
        .ok_or_else(|| OverlayError::EmptyEntry {
            domain: ring.domain.clone(),
            projection: projection.to_vec(),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LookupMode {
    OneShot,
    Continuous { sample_period_ms: u64, lifetime_ms: u64 },
    Subscribe { lifetime_ms: Option<u64> },
}

/// The flooded request: a parsed query plus routing state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupRequest {
    pub query_id: u64,
    pub domain: String,
    /// Attribute of the cluster the flood is confined to.
    pub cluster: String,
    pub predicate: Predicate,
    pub projection: Vec<String>,
    pub ttl: u32,
    pub origin: String,
    pub mode: LookupMode,
}

impl LookupRequest {
    pub fn cluster_key(&self) -> ClusterKey {
        ClusterKey::new(self.domain.clone(), self.cluster.clone())
    }
}

/// Struct-keyed maps travel as a list of pairs; JSON keys must be strings.
mod as_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(map: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// What a gateway knows about its own overlay position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerOverlayState {
    #[serde(with = "as_pairs")]
    pub neighbors: BTreeMap<ClusterKey, BTreeSet<PeerId>>,
    pub seen: SeenCache,
    /// neighbour → last time it was heard from (ms)
    pub last_heard: BTreeMap<PeerId, u64>,
}

impl PeerOverlayState {
    pub fn new(seen_capacity: usize) -> Self {
        PeerOverlayState {
            neighbors: BTreeMap::new(),
            seen: SeenCache::new(seen_capacity),
            last_heard: BTreeMap::new(),
        }
    }

    pub fn link(&mut self, cluster: &ClusterKey, peer: PeerId, now: u64) {
        self.neighbors.entry(cluster.clone()).or_default().insert(peer);
        self.last_heard.entry(peer).or_insert(now);
    }

    pub fn unlink(&mut self, cluster: &ClusterKey, peer: PeerId) {
        if let Some(set) = self.neighbors.get_mut(cluster) {
            set.remove(&peer);
        }
        self.forget_if_unused(peer);
    }

    pub fn drop_cluster(&mut self, cluster: &ClusterKey) -> BTreeSet<PeerId> {
        let gone = self.neighbors.remove(cluster).unwrap_or_default();
        for p in &gone {
            self.forget_if_unused(*p);
        }
        gone
    }

    fn forget_if_unused(&mut self, peer: PeerId) {
        if !self.neighbors.values().any(|s| s.contains(&peer)) {
            self.last_heard.remove(&peer);
        }
    }

    /// Every distinct neighbour across clusters.
    pub fn all_neighbors(&self) -> BTreeSet<PeerId> {
        self.neighbors.values().flatten().copied().collect()
    }

    pub fn heard_from(&mut self, peer: PeerId, now: u64) {
        if let Some(t) = self.last_heard.get_mut(&peer) {
            *t = (*t).max(now);
        }
    }
}

/// Drops every neighbour silent for longer than `timeout` ms and returns
/// them along with the clusters they were dropped from.
pub fn detect_failure(state: &mut PeerOverlayState, now: u64, timeout: u64) -> Vec<(PeerId, Vec<ClusterKey>)> {
    let dead: Vec<PeerId> = state
        .last_heard
        .iter()
        .filter(|(_, t)| now.saturating_sub(**t) > timeout)
        .map(|(p, _)| *p)
        .collect();
    let mut out = Vec::new();
    for p in dead {
        let clusters: Vec<ClusterKey> = state
            .neighbors
            .iter_mut()
            .filter_map(|(k, s)| s.remove(&p).then(|| k.clone()))
            .collect();
        state.last_heard.remove(&p);
        out.push((p, clusters));
    }
    out
}
