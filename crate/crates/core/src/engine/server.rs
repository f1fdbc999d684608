use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::wire::{Notification, RegisterAck, ResultTuple, ScEntry};
use super::{EngineError, QueryPlan};
use crate::matcher::{
    self, apply_decision, fresh_name, integrate, match_attribute, match_schema, CandidateStatus, Decision, Globals,
    MatchCandidate, MatchError, MatcherState, ReviewItem, SchemaMapping,
};
use crate::model::xml::parse_template;
use crate::model::{validate_schema, AttributeDef, LocalSchema, PeerId};
use crate::overlay::{self, ensure_ring, ClusterJoin, ClusterKey, DomainRing, LeaveReport, LookupMode, LookupRequest};

pub const SERVER_ADDRESS: &str = "server";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub address: String,
    pub local: LocalSchema,
    pub mapping: SchemaMapping,
    /// Review item → the decision provisionally applied while it waits.
    pub provisional: BTreeMap<u64, Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub ack: RegisterAck,
    pub review_ids: Vec<u64>,
    pub created_domain: bool,
    /// Local attributes put through the matcher.
    pub matched_attributes: usize,
    /// Identical re-registration: nothing changed.
    pub unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub removed: Vec<String>,
    pub added: Vec<(String, String)>,
    pub left: Vec<String>,
    pub joined: Vec<ClusterJoin>,
    pub review_ids: Vec<u64>,
    pub ack: RegisterAck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub item: ReviewItem,
    /// Present when the decision changed the peer's mapping.
    pub mapping: Option<SchemaMapping>,
    pub left: Vec<String>,
    pub joined: Vec<ClusterJoin>,
}

/// Server-side scan operator state for one issued query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collector {
    pub query_id: u64,
    pub domain: String,
    pub projection: Vec<String>,
    pub mode: LookupMode,
    pub issued_at: u64,
    pub last_activity: u64,
    /// Earliest time the collector may close.
    pub min_close: u64,
    pub quiet_ms: u64,
    pub entry: Option<(String, PeerId)>,
    pub results: Vec<ResultTuple>,
    pub notifications: Vec<Notification>,
    pub closed_at: Option<u64>,
}

impl Collector {
    pub fn close_due_at(&self) -> u64 {
        (self.last_activity + self.quiet_ms).max(self.min_close)
    }

    pub fn responders(&self) -> BTreeSet<PeerId> {
        self.results
            .iter()
            .map(|r| r.peer)
            .chain(self.notifications.iter().map(|n| n.peer))
            .collect()
    }

    /// Samples each peer is owed over the whole lifetime of a continuous query.
    pub fn expected_samples(&self) -> Option<usize> {
        match self.mode {
            LookupMode::Continuous {
                sample_period_ms,
                lifetime_ms,
            } => Some(expected_samples(sample_period_ms, lifetime_ms)),
            _ => None,
        }
    }

    /// Peers whose continuous stream ended short of the expected count.
    pub fn truncated(&self) -> Vec<PeerId> {
        let Some(expected) = self.expected_samples() else {
            return Vec::new();
        };
        let mut counts: BTreeMap<PeerId, usize> = BTreeMap::new();
        for r in &self.results {
            *counts.entry(r.peer).or_default() += 1;
        }
        counts.into_iter().filter(|(_, c)| *c < expected).map(|(p, _)| p).collect()
    }
}

pub fn expected_samples(period_ms: u64, lifetime_ms: u64) -> usize {
    lifetime_ms.checked_div(period_ms).map_or(1, |n| n as usize + 1)
}

/// What the server hands to a CSG for injection.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub query_id: u64,
    pub domain: String,
    /// Entry cluster and its head; `None` when no cluster serves the projection.
    pub entry: Option<(String, PeerId)>,
    pub request: LookupRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub globals: Globals,
    /// Context-space index: domain → ring (with its CSG).
    pub rings: BTreeMap<String, DomainRing>,
    pub matcher: MatcherState,
    pub peers: BTreeMap<PeerId, PeerRecord>,
    pub collectors: BTreeMap<u64, Collector>,
    pub degree: usize,
    next_peer: u64,
    next_query: u64,
}

impl Default for ServerState {
    fn default() -> Self {
        ServerState::new(MatcherState::default(), overlay::DEFAULT_DEGREE)
    }
}

fn sc_list(ring: &DomainRing, mapping: &SchemaMapping) -> Vec<ScEntry> {
    ring.clusters
        .iter()
        .filter(|c| mapping.pairs.contains_key(&c.attribute))
        .filter_map(|c| {
            c.head.map(|head| ScEntry {
                domain: ring.domain.clone(),
                attribute: c.attribute.clone(),
                head,
            })
        })
        .collect()
}

impl ServerState {
    pub fn new(matcher: MatcherState, degree: usize) -> Self {
        ServerState {
            globals: Globals::new(),
            rings: BTreeMap::new(),
            matcher,
            peers: BTreeMap::new(),
            collectors: BTreeMap::new(),
            degree,
            next_peer: 1,
            next_query: 1,
        }
    }

    pub fn peer_by_address(&self, address: &str) -> Option<PeerId> {
        self.peers.iter().find(|(_, r)| r.address == address).map(|(p, _)| *p)
    }

    fn ack(&self, peer: PeerId, joins: &[ClusterJoin]) -> RegisterAck {
        let mapping = self.peers[&peer].mapping.clone();
        let ring = &self.rings[&mapping.global_domain];
        RegisterAck {
            peer,
            sc_list: sc_list(ring, &mapping),
            neighbors: joins
                .iter()
                .map(|j| (ring.key(&j.attribute), j.neighbors.clone()))
                .collect(),
            mapping,
        }
    }

    /// Full registration pipeline for an XML schema template.
    pub fn register_space<R: Rng + ?Sized>(
        &mut self,
        template: &str,
        address: &str,
        rng: &mut R,
    ) -> Result<Registration, EngineError> {
        let local = parse_template(template)?;
        self.register_schema(local, address, rng)
    }

    pub fn register_schema<R: Rng + ?Sized>(
        &mut self,
        local: LocalSchema,
        address: &str,
        rng: &mut R,
    ) -> Result<Registration, EngineError> {
        let violations = validate_schema(&local);
        if !violations.is_empty() {
            return Err(EngineError::Schema(violations));
        }
        if let Some(peer) = self.peer_by_address(address) {
            if self.peers[&peer].local == local {
                return Ok(Registration {
                    ack: self.ack(peer, &[]),
                    review_ids: Vec::new(),
                    created_domain: false,
                    matched_attributes: 0,
                    unchanged: true,
                });
            }
            let report = self.update_schema_local(peer, local, rng)?;
            return Ok(Registration {
                matched_attributes: report.added.len(),
                ack: report.ack,
                review_ids: report.review_ids,
                created_domain: false,
                unchanged: false,
            });
        }

        let mut proposal = match_schema(&local, &self.globals, &self.matcher);
        let created_domain = matches!(proposal.target, matcher::ProposalTarget::CreateNew);

        // Exact matches claim their globals first; a pending candidate is
        // provisionally accepted when its global is still free, otherwise it
        // is provisionally rejected and flagged as a conflict.
        let mut claimed: BTreeSet<String> = BTreeSet::new();
        let mut conflicts: BTreeSet<String> = BTreeSet::new();
        for m in proposal.matches.iter_mut().filter(|m| m.status == CandidateStatus::Confirmed) {
            if !claimed.insert(m.global_name.clone()) {
                m.status = CandidateStatus::Pending;
                conflicts.insert(m.local_name.clone());
            }
        }
        let mut decisions: BTreeMap<String, Decision> = BTreeMap::new();
        for m in proposal.matches.iter().filter(|m| m.status == CandidateStatus::Pending) {
            let free = !conflicts.contains(&m.local_name) && claimed.insert(m.global_name.clone());
            if !free {
                conflicts.insert(m.local_name.clone());
            }
            decisions.insert(m.local_name.clone(), if free { Decision::Confirm } else { Decision::Reject });
        }

        let peer = PeerId(self.next_peer);
        let (globals, mapping) = integrate(&self.globals, &proposal, &decisions, peer)?;
        self.next_peer += 1;
        self.globals = globals;

        let mut review_ids = Vec::new();
        let mut provisional = BTreeMap::new();
        for m in &proposal.matches {
            if let Some(id) = self.matcher.record(Some(peer), m, conflicts.contains(&m.local_name)) {
                review_ids.push(id);
                provisional.insert(id, decisions[&m.local_name]);
            }
        }

        let schema = &self.globals[&mapping.global_domain];
        let ring = ensure_ring(&mut self.rings, schema);
        let attrs: Vec<String> = mapping.global_attributes().map(str::to_string).collect();
        let attrs = order_by_ring(ring, attrs);
        let joins = overlay::join(ring, peer, &attrs, self.degree, rng)?;
        let matched_attributes = local.attributes.len();
        self.peers.insert(
            peer,
            PeerRecord {
                address: address.to_string(),
                local,
                mapping,
                provisional,
            },
        );
        Ok(Registration {
            ack: self.ack(peer, &joins),
            review_ids,
            created_domain,
            matched_attributes,
            unchanged: false,
        })
    }

    pub fn update_schema<R: Rng + ?Sized>(
        &mut self,
        peer: PeerId,
        template: &str,
        rng: &mut R,
    ) -> Result<UpdateReport, EngineError> {
        let local = parse_template(template)?;
        self.update_schema_local(peer, local, rng)
    }

    pub fn update_schema_local<R: Rng + ?Sized>(
        &mut self,
        peer: PeerId,
        local: LocalSchema,
        rng: &mut R,
    ) -> Result<UpdateReport, EngineError> {
        let violations = validate_schema(&local);
        if !violations.is_empty() {
            return Err(EngineError::Schema(violations));
        }
        let mut record = self.peers.get(&peer).cloned().ok_or(EngineError::UnknownPeer(peer))?;
        let domain = record.mapping.global_domain.clone();

        let kept = |a: &AttributeDef, other: &LocalSchema| other.attribute(&a.name).is_some_and(|b| b.kind == a.kind);
        let removed_local: Vec<AttributeDef> =
            record.local.attributes.iter().filter(|a| !kept(a, &local)).cloned().collect();
        let added_local: Vec<AttributeDef> =
            local.attributes.iter().filter(|a| !kept(a, &record.local)).cloned().collect();

        let mut removed = Vec::new();
        for a in &removed_local {
            if let Some(g) = record.mapping.global_name(&a.name).map(str::to_string) {
                record.mapping.pairs.remove(&g);
                removed.push(g);
            }
            let stale: Vec<u64> = self
                .matcher
                .queue
                .iter()
                .filter(|i| i.peer == Some(peer) && i.candidate.local_name == a.name)
                .map(|i| i.id)
                .collect();
            self.matcher.queue.retain(|i| !stale.contains(&i.id));
            for id in stale {
                record.provisional.remove(&id);
            }
        }
        let left = {
            let ring = self.rings.get_mut(&domain).ok_or_else(|| EngineError::UnknownDomain(domain.clone()))?;
            overlay::leave(ring, peer, Some(&removed)).left
        };

        let mut added = Vec::new();
        let mut review_ids = Vec::new();
        for a in &added_local {
            let schema = self.globals.get_mut(&domain).expect("peer's domain exists");
            let candidates: Vec<MatchCandidate> = match_attribute(
                a,
                schema
                    .attributes
                    .iter()
                    .filter(|g| !record.mapping.pairs.contains_key(&g.name))
                    .map(|g| (domain.as_str(), g)),
                &self.matcher,
            );
            let global = match candidates.into_iter().next() {
                Some(c) => {
                    if let Some(id) = self.matcher.record(Some(peer), &c, false) {
                        review_ids.push(id);
                        record.provisional.insert(id, Decision::Confirm);
                    }
                    c.global_name
                }
                None => provide(schema, a, &record.mapping),
            };
            record.mapping.pairs.insert(global.clone(), a.name.clone());
            added.push((a.name.clone(), global));
        }
        record.local = local;

        let schema = &self.globals[&domain];
        let ring = ensure_ring(&mut self.rings, schema);
        let new_globals: Vec<String> = order_by_ring(ring, added.iter().map(|(_, g)| g.clone()).collect());
        let joined = overlay::join(ring, peer, &new_globals, self.degree, rng)?;
        self.peers.insert(peer, record);
        Ok(UpdateReport {
            removed,
            added,
            left,
            ack: self.ack(peer, &joined),
            joined,
            review_ids,
        })
    }

    /// Applies an administrator decision on a review item, fixing up the
    /// owning peer's mapping and memberships when it differs from what was
    /// provisionally assumed.
    pub fn review<R: Rng + ?Sized>(
        &mut self,
        id: u64,
        decision: Decision,
        rng: &mut R,
    ) -> Result<ReviewOutcome, EngineError> {
        let item = self.matcher.pending(id).cloned().ok_or(MatchError::NotPending(id))?;
        let Some(peer) = item.peer.filter(|p| self.peers.contains_key(p)) else {
            let item = apply_decision(&mut self.matcher, id, decision)?;
            return Ok(ReviewOutcome {
                item,
                mapping: None,
                left: Vec::new(),
                joined: Vec::new(),
            });
        };
        let record = &self.peers[&peer];
        let provisional = record.provisional.get(&id).copied().unwrap_or(Decision::Confirm);
        let cand = &item.candidate;
        let domain = record.mapping.global_domain.clone();

        let target = match (decision, provisional) {
            (Decision::Confirm, Decision::Reject) => {
                if let Some(holder) = record.mapping.local_name(&cand.global_name) {
                    return Err(MatchError::Conflict {
                        domain,
                        global: cand.global_name.clone(),
                        first: holder.to_string(),
                        second: cand.local_name.clone(),
                    }
                    .into());
                }
                Some(cand.global_name.clone())
            }
            (Decision::Reject, Decision::Confirm) => {
                let def = record
                    .local
                    .attribute(&cand.local_name)
                    .cloned()
                    .ok_or_else(|| EngineError::UnknownAttribute(cand.local_name.clone()))?;
                let mut without = record.mapping.clone();
                without.pairs.remove(&cand.global_name);
                let schema = self.globals.get_mut(&domain).expect("peer's domain exists");
                Some(provide_excluding(schema, &def, &without, &cand.global_name))
            }
            _ => None,
        };
        let item = apply_decision(&mut self.matcher, id, decision)?;
        let record = self.peers.get_mut(&peer).expect("checked");
        record.provisional.remove(&id);
        let Some(target) = target else {
            return Ok(ReviewOutcome {
                item,
                mapping: None,
                left: Vec::new(),
                joined: Vec::new(),
            });
        };

        let old = record.mapping.global_name(&cand.local_name).map(str::to_string);
        if let Some(old) = &old {
            record.mapping.pairs.remove(old);
        }
        record.mapping.pairs.insert(target.clone(), cand.local_name.clone());
        let mapping = record.mapping.clone();
        let ring = ensure_ring(&mut self.rings, &self.globals[&domain]);
        let left = match &old {
            Some(old) => overlay::leave(ring, peer, Some(std::slice::from_ref(old))).left,
            None => Vec::new(),
        };
        let joined = overlay::join(ring, peer, &[target], self.degree, rng)?;
        Ok(ReviewOutcome {
            item,
            mapping: Some(mapping),
            left,
            joined,
        })
    }

    /// A neighbour reported `peer` gone: purge it from its ring.
    pub fn peer_down(&mut self, peer: PeerId) -> Option<LeaveReport> {
        let record = self.peers.remove(&peer)?;
        if let Some(schema) = self.globals.get_mut(&record.mapping.global_domain) {
            schema.member_count = schema.member_count.saturating_sub(1);
        }
        let ring = self.rings.get_mut(&record.mapping.global_domain)?;
        Some(overlay::leave(ring, peer, None))
    }

    /// Steps one and two of a lookup: find the domain's CSG in the space
    /// index, then let the CSG pick the entry cluster. Opens the collector.
    pub fn start_query(
        &mut self,
        plan: &QueryPlan,
        now: u64,
        quiet_ms: u64,
        origin: &str,
    ) -> Result<Dispatch, EngineError> {
        let scan = plan.scan();
        let ring = self
            .rings
            .get(&scan.domain)
            .ok_or_else(|| EngineError::UnknownDomain(scan.domain.clone()))?;
        let entry = overlay::route_to_entry(ring, &scan.projection)
            .ok()
            .map(|c| (c.attribute.clone(), c.head.expect("route_to_entry skips empty clusters")));
        let query_id = self.next_query;
        self.next_query += 1;
        let request = LookupRequest {
            query_id,
            domain: scan.domain.clone(),
            cluster: entry.as_ref().map(|(a, _)| a.clone()).unwrap_or_default(),
            predicate: scan.predicate.clone(),
            projection: scan.projection.clone(),
            ttl: scan.ttl,
            origin: origin.to_string(),
            mode: scan.mode.clone(),
        };
        let stream_ms = match scan.mode {
            LookupMode::OneShot => 0,
            LookupMode::Continuous { lifetime_ms, .. } => lifetime_ms + quiet_ms,
            LookupMode::Subscribe { lifetime_ms } => lifetime_ms.map_or(0, |l| l + quiet_ms),
        };
        self.collectors.insert(
            query_id,
            Collector {
                query_id,
                domain: scan.domain.clone(),
                projection: scan.projection.clone(),
                mode: scan.mode.clone(),
                issued_at: now,
                last_activity: now,
                min_close: now + stream_ms,
                quiet_ms,
                entry: entry.clone(),
                results: Vec::new(),
                notifications: Vec::new(),
                closed_at: None,
            },
        );
        Ok(Dispatch {
            query_id,
            domain: scan.domain.clone(),
            entry,
            request,
        })
    }

    /// Stops the quiescence clock from running while the request is still
    /// travelling to the entry cluster.
    pub fn touch(&mut self, query_id: u64, now: u64) {
        if let Some(c) = self.collectors.get_mut(&query_id) {
            c.last_activity = c.last_activity.max(now);
        }
    }

    pub fn on_result(&mut self, tuple: ResultTuple, now: u64) -> Result<(), EngineError> {
        let c = self
            .collectors
            .get_mut(&tuple.query_id)
            .ok_or(EngineError::UnknownQuery(tuple.query_id))?;
        if c.closed_at.is_none() {
            c.last_activity = c.last_activity.max(now);
            c.results.push(tuple);
        }
        Ok(())
    }

    pub fn on_notify(&mut self, n: Notification, now: u64) -> Result<(), EngineError> {
        let c = self
            .collectors
            .get_mut(&n.query_id)
            .ok_or(EngineError::UnknownQuery(n.query_id))?;
        if c.closed_at.is_none() {
            c.last_activity = c.last_activity.max(now);
            c.notifications.push(n);
        }
        Ok(())
    }

    /// Closes the collector if it has been quiet long enough.
    pub fn try_close(&mut self, query_id: u64, now: u64) -> bool {
        match self.collectors.get_mut(&query_id) {
            Some(c) if c.closed_at.is_none() && now >= c.close_due_at() => {
                c.closed_at = Some(now);
                true
            }
            _ => false,
        }
    }

    /// Checks every ring; also that the space index covers the globals.
    pub fn check_invariants(&self) -> Result<(), String> {
        let idx: BTreeSet<&String> = self.rings.keys().collect();
        let globals: BTreeSet<&String> = self.globals.keys().collect();
        if idx != globals {
            return Err("space index keys differ from global schema names".into());
        }
        for ring in self.rings.values() {
            ring.check_invariants()?;
            let schema = &self.globals[&ring.domain];
            for c in &ring.clusters {
                if !schema.has_attribute(&c.attribute) {
                    return Err(format!("cluster {} names no attribute of {}", c.attribute, ring.domain));
                }
            }
        }
        for (p, r) in &self.peers {
            if !r.mapping.is_bijective() {
                return Err(format!("mapping of {p} is not bijective"));
            }
            let ring = &self.rings[&r.mapping.global_domain];
            let member_of: BTreeSet<&str> = ring.clusters_of(*p).into_iter().collect();
            let mapped: BTreeSet<&str> = r.mapping.global_attributes().collect();
            if member_of != mapped {
                return Err(format!("{p} cluster memberships differ from its mapping"));
            }
        }
        Ok(())
    }

    pub fn cluster_key(&self, domain: &str, attribute: &str) -> ClusterKey {
        ClusterKey::new(domain, attribute)
    }
}

/// Joins happen in ring order so neighbour sampling is independent of how
/// the mapping happens to be keyed.
fn order_by_ring(ring: &DomainRing, mut attrs: Vec<String>) -> Vec<String> {
    attrs.sort_by_key(|a| ring.position(a).unwrap_or(usize::MAX));
    attrs
}

/// The global attribute that will carry an unmatched local attribute: a
/// same-named, same-kind one nobody in `mapping` holds, or a fresh one
/// appended to the schema.
fn provide(schema: &mut crate::model::GlobalSchema, def: &AttributeDef, mapping: &SchemaMapping) -> String {
    provide_excluding(schema, def, mapping, "")
}

fn provide_excluding(
    schema: &mut crate::model::GlobalSchema,
    def: &AttributeDef,
    mapping: &SchemaMapping,
    excluded: &str,
) -> String {
    let reusable = |name: &str, schema: &crate::model::GlobalSchema| {
        name != excluded
            && !mapping.pairs.contains_key(name)
            && schema.attribute(name).is_some_and(|g| g.kind == def.kind)
    };
    if reusable(&def.name, schema) {
        return def.name.clone();
    }
    // `excluded` is itself a schema attribute, so a fresh name never hits it.
    let name = fresh_name(schema, &def.name);
    schema.attributes.push(AttributeDef {
        name: name.clone(),
        ..def.clone()
    });
    name
}
