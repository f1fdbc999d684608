use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SimConfig, SimError};
use crate::cql::{parse_with_ttl, validate, QueryKind};
use crate::engine::{
    plan, Message, Notification, PhaseTiming, PsgState, ResultTuple, ServerState, QUERY_PHASES, REGISTRATION_PHASES,
    SERVER_ADDRESS,
};
use crate::engine::ReviewOutcome;
use crate::matcher::{Decision, MatcherState};
use crate::model::{PeerId, SpaceProfile};
use crate::model::xml::render_template;
use crate::overlay::{detect_failure, LookupMode, LookupRequest};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Node {
    Server,
    Csg(String),
    Peer(PeerId),
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Server => f.write_str("server"),
            Node::Csg(d) => write!(f, "csg:{d}"),
            Node::Peer(p) => p.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Deliver { from: Node, to: Node, msg: Message },
    /// CSG forwards an injected lookup to the entry head.
    Inject { query_id: u64 },
    PingTick { peer: PeerId },
    Sample { peer: PeerId, query_id: u64 },
    SubCheck { peer: PeerId, query_id: u64 },
    CloseCheck { query_id: u64 },
    Depart { peer: PeerId },
}

impl Event {
    fn kind(&self) -> &'static str {
        match self {
            Event::Deliver { msg, .. } => msg.kind(),
            Event::Inject { .. } => "INJECT",
            Event::PingTick { .. } => "PING_TICK",
            Event::Sample { .. } => "SAMPLE",
            Event::SubCheck { .. } => "SUB_CHECK",
            Event::CloseCheck { .. } => "CLOSE_CHECK",
            Event::Depart { .. } => "DEPART",
        }
    }

    fn summary(&self) -> String {
        match self {
            Event::Deliver { from, to, msg } => format!("{from}->{to} {}", msg.summary()),
            Event::Inject { query_id } | Event::CloseCheck { query_id } => format!("q{query_id}"),
            Event::PingTick { peer } | Event::Depart { peer } => peer.to_string(),
            Event::Sample { peer, query_id } | Event::SubCheck { peer, query_id } => format!("{peer}/q{query_id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Queued {
    time: u64,
    seq: u64,
    event: Event,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (time, seq)
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const HOP_STREAM_BASE: u64 = 1 << 32;

/// One independent stream per subsystem, so adding draws in one place does
/// not perturb the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRngs {
    pub topology: ChaCha8Rng,
    pub latency: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub workload: ChaCha8Rng,
}

impl SimRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |n: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(n);
            r
        };
        SimRngs {
            topology: stream(1),
            latency: stream(2),
            data: stream(3),
            workload: stream(4),
        }
    }
}

/// Simulator-side bookkeeping for one issued query.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTrack {
    pub ttl: u32,
    pub issued_at: u64,
    pub lookup_done_at: u64,
    pub entry_at: Option<u64>,
    /// Per-hop-depth latency, drawn once per query.
    pub hop_latency: Vec<u64>,
    pub messages: usize,
    pub reached: BTreeSet<PeerId>,
    pub request: Option<LookupRequest>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationTrack {
    pub marks: Vec<u64>,
    pub outstanding_joins: usize,
    pub peer: Option<PeerId>,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    hasher: Sha256,
    pub events: u64,
    pub lines: Option<Vec<String>>,
}

impl Trace {
    fn record(&mut self, time: u64, event: &Event) {
        let kind = event.kind();
        let summary = event.summary();
        self.hasher.update(format!("t={time} {kind} {summary}\n").as_bytes());
        self.events += 1;
        if let Some(lines) = &mut self.lines {
            let d = Sha256::digest(summary.as_bytes());
            lines.push(format!("t={time} {kind} {}", hex::encode(&d[..8])));
        }
    }

    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimWorld {
    pub config: SimConfig,
    pub clock: u64,
    pub server: ServerState,
    pub psgs: BTreeMap<PeerId, PsgState>,
    pub departed: BTreeSet<PeerId>,
    pub rngs: SimRngs,
    queue: BinaryHeap<Queued>,
    seq: u64,
    pub queries: BTreeMap<u64, QueryTrack>,
    pub registrations: BTreeMap<String, RegistrationTrack>,
    /// Every processed event time, non-decreasing by construction.
    pub last_event_time: u64,
    pub message_counts: BTreeMap<String, u64>,
    /// Profiles of spaces whose REGISTER is in flight, by address.
    pending_profiles: BTreeMap<String, SpaceProfile>,
    #[serde(skip)]
    pub trace: Trace,
    next_nonce: u64,
}

impl SimWorld {
    pub fn new(config: SimConfig) -> Self {
        let matcher = MatcherState::default();
        SimWorld {
            server: ServerState::new(matcher, config.degree),
            rngs: SimRngs::new(config.seed),
            config,
            clock: 0,
            psgs: BTreeMap::new(),
            departed: BTreeSet::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            queries: BTreeMap::new(),
            registrations: BTreeMap::new(),
            last_event_time: 0,
            message_counts: BTreeMap::new(),
            pending_profiles: BTreeMap::new(),
            trace: Trace::default(),
            next_nonce: 0,
        }
    }

    pub fn enable_trace_dump(&mut self) {
        self.trace.lines = Some(Vec::new());
    }

    pub fn trace_digest(&self) -> String {
        self.trace.digest()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, time: u64, event: Event) {
        debug_assert!(time >= self.clock, "scheduling into the past");
        self.seq += 1;
        self.queue.push(Queued {
            time,
            seq: self.seq,
            event,
        });
    }

    fn latency(&mut self) -> u64 {
        let (lo, hi) = (self.config.latency_min_ms, self.config.latency_max_ms);
        if lo == hi {
            lo
        } else {
            self.rngs.latency.gen_range(lo..=hi)
        }
    }

    fn send(&mut self, from: Node, to: Node, msg: Message, delay: u64) {
        let at = self.clock + delay;
        self.schedule(at, Event::Deliver { from, to, msg });
    }

    /// Processes the next event; false when the queue is empty.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(q) = self.queue.pop() else {
            return Ok(false);
        };
        if q.time < self.clock {
            return Err(SimError::Invariant(format!("clock would move back from {} to {}", self.clock, q.time)));
        }
        self.clock = q.time;
        self.last_event_time = q.time;
        self.trace.record(q.time, &q.event);
        self.handle(q.event)?;
        Ok(true)
    }

    pub fn run_until_idle(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    /// Processes every event with time ≤ `t`, then parks the clock at `t`.
    pub fn run_until(&mut self, t: u64) -> Result<(), SimError> {
        while self.queue.peek().is_some_and(|q| q.time <= t) {
            self.step()?;
        }
        self.clock = self.clock.max(t);
        Ok(())
    }

    pub fn run_until_closed(&mut self, query_id: u64) -> Result<(), SimError> {
        while self.server.collectors.get(&query_id).is_some_and(|c| c.closed_at.is_none()) {
            if !self.step()? {
                return Err(SimError::Invariant(format!("query {query_id} never closed")));
            }
        }
        Ok(())
    }

    fn is_live(&self, p: PeerId) -> bool {
        !self.departed.contains(&p) && self.psgs.contains_key(&p)
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::Deliver { from, to, msg } => {
                *self.message_counts.entry(msg.kind().to_string()).or_default() += 1;
                match to {
                    Node::Server => self.at_server(from, msg),
                    Node::Csg(_) => self.at_csg(msg),
                    Node::Peer(p) if self.is_live(p) => self.at_peer(p, from, msg),
                    Node::Peer(_) => Ok(()),
                }
            }
            Event::Inject { query_id } => self.inject(query_id),
            Event::PingTick { peer } => self.ping_tick(peer),
            Event::Sample { peer, query_id } => {
                if !self.is_live(peer) {
                    return Ok(());
                }
                let psg = self.psgs.get_mut(&peer).expect("live");
                if let Some(tuple) = psg.run_continuous(query_id, self.clock) {
                    let next = psg.next_sample(query_id);
                    let d = self.config.cost_eval_ms + self.latency();
                    self.send(Node::Peer(peer), Node::Server, Message::Result(tuple), d);
                    if let Some(t) = next {
                        self.schedule(t, Event::Sample { peer, query_id });
                    }
                }
                Ok(())
            }
            Event::SubCheck { peer, query_id } => {
                if !self.is_live(peer) {
                    return Ok(());
                }
                if let Some(n) = self.psgs.get_mut(&peer).expect("live").handle_subscription(query_id, self.clock) {
                    let d = self.config.cost_eval_ms + self.latency();
                    self.send(Node::Peer(peer), Node::Server, Message::Notify(n), d);
                }
                Ok(())
            }
            Event::CloseCheck { query_id } => {
                self.server.try_close(query_id, self.clock);
                Ok(())
            }
            Event::Depart { peer } => {
                self.departed.insert(peer);
                Ok(())
            }
        }
    }

    fn schedule_close_check(&mut self, query_id: u64) {
        if let Some(c) = self.server.collectors.get(&query_id) {
            if c.closed_at.is_none() {
                let at = c.close_due_at().max(self.clock);
                self.schedule(at, Event::CloseCheck { query_id });
            }
        }
    }

    fn at_server(&mut self, from: Node, msg: Message) -> Result<(), SimError> {
        match msg {
            Message::Register { address, template } => self.server_register(address, template),
            Message::Result(t) => {
                let q = t.query_id;
                self.server.on_result(t, self.clock)?;
                self.schedule_close_check(q);
                Ok(())
            }
            Message::Notify(n) => {
                let q = n.query_id;
                self.server.on_notify(n, self.clock)?;
                self.schedule_close_check(q);
                Ok(())
            }
            Message::PeerDown { peer } => {
                self.server.peer_down(peer);
                Ok(())
            }
            other => Err(SimError::Invariant(format!("server got unexpected {} from {from}", other.kind()))),
        }
    }

    fn server_register(&mut self, address: String, template: String) -> Result<(), SimError> {
        let arrived = self.clock;
        let reg = self
            .server
            .register_space(&template, &address, &mut self.rngs.topology)?;
        let request_done = arrived + self.config.cost_register_parse_ms;
        let matching_done = request_done + self.config.cost_match_per_attr_ms * reg.matched_attributes as u64;
        let delay = matching_done - arrived + self.config.cost_sc_list_ms + self.latency();
        if let Some(track) = self.registrations.get_mut(&address) {
            track.marks.push(request_done);
            track.marks.push(matching_done);
            track.peer = Some(reg.ack.peer);
        }
        if let Some(profile) = self.pending_profiles.remove(&address) {
            let mut psg = PsgState::new(reg.ack.peer, profile);
            psg.overlay = crate::overlay::PeerOverlayState::new(self.config.seen_capacity);
            self.psgs.insert(reg.ack.peer, psg);
        }
        self.send(Node::Server, Node::Peer(reg.ack.peer), Message::RegisterAck(reg.ack), delay);
        Ok(())
    }

    fn at_csg(&mut self, msg: Message) -> Result<(), SimError> {
        match msg {
            Message::Lookup(r) | Message::Subscribe(r) => {
                let at = self.clock + self.config.cost_csg_ms;
                self.schedule(at, Event::Inject { query_id: r.query_id });
                Ok(())
            }
            other => Err(SimError::Invariant(format!("CSG got unexpected {}", other.kind()))),
        }
    }

    fn inject(&mut self, query_id: u64) -> Result<(), SimError> {
        let entry = self.server.collectors.get(&query_id).and_then(|c| c.entry.clone());
        let track = self.queries.get(&query_id).cloned().unwrap_or_default();
        match (entry, track.request) {
            (Some((_, head)), Some(req)) => {
                let lat = self.hop_latency(query_id, 0);
                let domain = req.domain.clone();
                self.send(Node::Csg(domain), Node::Peer(head), Message::for_request(req), lat);
            }
            _ => {
                self.server.touch(query_id, self.clock);
                self.schedule_close_check(query_id);
            }
        }
        Ok(())
    }

    fn hop_latency(&self, query_id: u64, depth: usize) -> u64 {
        self.queries
            .get(&query_id)
            .and_then(|t| t.hop_latency.get(depth).copied())
            .unwrap_or(self.config.latency_max_ms)
    }

    /// One latency per hop depth, from a stream keyed by (seed, query id):
    /// every peer at the same BFS depth hears the request at the same time,
    /// and worlds sharing a seed share their hop delays.
    fn draw_hop_latencies(&self, query_id: u64, ttl: u32) -> Vec<u64> {
        let (lo, hi) = (self.config.latency_min_ms, self.config.latency_max_ms);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(HOP_STREAM_BASE + query_id);
        (0..=ttl).map(|_| rng.gen_range(lo..=hi)).collect()
    }

    fn at_peer(&mut self, peer: PeerId, from: Node, msg: Message) -> Result<(), SimError> {
        let now = self.clock;
        match msg {
            Message::RegisterAck(ack) => {
                let psg = self.psgs.get_mut(&peer).ok_or_else(|| SimError::Invariant(format!("ack for unknown {peer}")))?;
                psg.apply_ack(&ack, now);
                let address = psg.profile.address.clone();
                let mut joins = 0;
                for (cluster, neighbors) in &ack.neighbors {
                    for n in neighbors {
                        let lat = self.latency();
                        let msg = Message::Join {
                            cluster: cluster.clone(),
                            peer,
                        };
                        self.send(Node::Peer(peer), Node::Peer(*n), msg, lat);
                        joins += 1;
                    }
                }
                if let Some(track) = self.registrations.get_mut(&address) {
                    track.marks.push(now);
                    track.outstanding_joins = joins;
                    if joins == 0 {
                        track.marks.push(now);
                        track.done = true;
                    }
                }
                Ok(())
            }
            Message::Join { cluster, peer: joiner } => {
                self.psgs.get_mut(&peer).expect("live").on_join(&cluster, joiner, now);
                let d = self.config.cost_join_ms + self.latency();
                self.send(Node::Peer(peer), Node::Peer(joiner), Message::JoinAck { cluster, peer }, d);
                Ok(())
            }
            Message::JoinAck { .. } => {
                let address = self.psgs[&peer].profile.address.clone();
                if let Some(track) = self.registrations.get_mut(&address) {
                    track.outstanding_joins = track.outstanding_joins.saturating_sub(1);
                    if track.outstanding_joins == 0 && !track.done {
                        track.marks.push(now);
                        track.done = true;
                    }
                }
                Ok(())
            }
            Message::Ping { nonce } => {
                let Node::Peer(sender) = from else {
                    return Ok(());
                };
                self.psgs.get_mut(&peer).expect("live").overlay.heard_from(sender, now);
                let lat = self.latency();
                self.send(Node::Peer(peer), Node::Peer(sender), Message::Pong { nonce }, lat);
                Ok(())
            }
            Message::Pong { .. } => {
                if let Node::Peer(sender) = from {
                    self.psgs.get_mut(&peer).expect("live").overlay.heard_from(sender, now);
                }
                Ok(())
            }
            Message::Lookup(req) | Message::Subscribe(req) => self.peer_lookup(peer, from, req),
            other => Err(SimError::Invariant(format!("{peer} got unexpected {}", other.kind()))),
        }
    }

    fn peer_lookup(&mut self, peer: PeerId, from: Node, req: LookupRequest) -> Result<(), SimError> {
        let now = self.clock;
        let qid = req.query_id;
        let ttl0 = self.queries.get(&qid).map_or(req.ttl, |t| t.ttl);
        let sender = match from {
            Node::Peer(p) => Some(p),
            _ => None,
        };
        if let Some(t) = self.queries.get_mut(&qid) {
            if sender.is_some() {
                t.messages += 1;
            } else {
                t.entry_at = Some(now);
            }
        }
        if sender.is_none() {
            self.server.touch(qid, now);
            self.schedule_close_check(qid);
        }
        let out = self.psgs.get_mut(&peer).expect("live").handle_lookup(&req, sender, now);
        if out.duplicate {
            return Ok(());
        }
        if let Some(t) = self.queries.get_mut(&qid) {
            t.reached.insert(peer);
        }
        let depth = (ttl0 - req.ttl) as usize + 1;
        debug_assert!(self.queries.get(&qid).is_none_or(|t| depth < t.hop_latency.len()));
        if !out.forwards.is_empty() {
            let lat = self.hop_latency(qid, depth);
            for (n, fwd) in out.forwards {
                self.send(Node::Peer(peer), Node::Peer(n), Message::for_request(fwd), lat);
            }
        }
        if let Some(tuple) = out.result {
            let d = self.config.cost_eval_ms + self.latency();
            self.send(Node::Peer(peer), Node::Server, Message::Result(tuple), d);
        }
        if let Some(n) = out.notify {
            let d = self.config.cost_eval_ms + self.latency();
            self.send(Node::Peer(peer), Node::Server, Message::Notify(n), d);
        }
        if let Some(t) = self.psgs[&peer].next_sample(qid) {
            self.schedule(t, Event::Sample { peer, query_id: qid });
        }
        if self.psgs[&peer].subscriptions.contains_key(&qid) {
            let horizon = self.server.collectors.get(&qid).map_or(now, |c| c.min_close);
            for t in self.psgs[&peer].subscription_checks(qid, now, horizon) {
                self.schedule(t, Event::SubCheck { peer, query_id: qid });
            }
        }
        Ok(())
    }

    fn ping_tick(&mut self, peer: PeerId) -> Result<(), SimError> {
        if !self.is_live(peer) || !self.config.liveness {
            return Ok(());
        }
        let now = self.clock;
        let period = self.config.ping_period_ms;
        let timeout = period * self.config.ping_max_missed;
        let psg = self.psgs.get_mut(&peer).expect("live");
        let dropped = detect_failure(&mut psg.overlay, now, timeout);
        let neighbors = psg.overlay.all_neighbors();
        for (gone, _) in dropped {
            let lat = self.latency();
            self.send(Node::Peer(peer), Node::Server, Message::PeerDown { peer: gone }, lat);
        }
        for n in neighbors {
            self.next_nonce += 1;
            let lat = self.latency();
            let nonce = self.next_nonce;
            self.send(Node::Peer(peer), Node::Peer(n), Message::Ping { nonce }, lat);
        }
        self.schedule(now + period, Event::PingTick { peer });
        Ok(())
    }

    /// Starts ping rounds at every live peer, phases spread over one period.
    pub fn start_liveness(&mut self) {
        self.config.liveness = true;
        let peers: Vec<PeerId> = self.psgs.keys().copied().filter(|p| !self.departed.contains(p)).collect();
        let now = self.clock;
        for p in peers {
            if let Some(psg) = self.psgs.get_mut(&p) {
                let heard: Vec<PeerId> = psg.overlay.last_heard.keys().copied().collect();
                for h in heard {
                    psg.overlay.heard_from(h, now);
                }
            }
            let offset = self.rngs.workload.gen_range(0..self.config.ping_period_ms.max(1));
            self.schedule(now + offset, Event::PingTick { peer: p });
        }
    }

    /// Silent departure at `at`: the peer just stops responding.
    pub fn schedule_departure(&mut self, peer: PeerId, at: u64) {
        self.schedule(at, Event::Depart { peer });
    }

    /// Registration outside the event loop: the same template pipeline at
    /// the server, with the ACK and the neighbours' JOIN handling applied
    /// at the current time.
    pub fn register_direct(&mut self, profile: SpaceProfile) -> Result<PeerId, SimError> {
        let template = render_template(&profile.schema);
        let reg = self
            .server
            .register_space(&template, &profile.address, &mut self.rngs.topology)?;
        let peer = reg.ack.peer;
        let mut psg = PsgState::new(peer, profile);
        psg.overlay = crate::overlay::PeerOverlayState::new(self.config.seen_capacity);
        psg.apply_ack(&reg.ack, self.clock);
        self.psgs.insert(peer, psg);
        for (cluster, neighbors) in &reg.ack.neighbors {
            for n in neighbors {
                if let Some(other) = self.psgs.get_mut(n) {
                    other.on_join(cluster, peer, self.clock);
                }
            }
        }
        Ok(peer)
    }

    /// Applies an administrator decision and mirrors any mapping or cluster
    /// change into the affected gateway and its old and new neighbours.
    pub fn review(&mut self, id: u64, decision: Decision) -> Result<ReviewOutcome, SimError> {
        let owner = self.server.matcher.pending(id).and_then(|item| item.peer);
        let outcome = self.server.review(id, decision, &mut self.rngs.topology)?;
        let Some(peer) = owner else {
            return Ok(outcome);
        };
        let now = self.clock;
        let Some(mapping) = outcome.mapping.clone() else {
            return Ok(outcome);
        };
        let domain = mapping.global_domain.clone();
        let mut unlinked = Vec::new();
        if let Some(psg) = self.psgs.get_mut(&peer) {
            psg.mapping = Some(mapping);
            for attribute in &outcome.left {
                let key = self.server.cluster_key(&domain, attribute);
                for n in psg.overlay.drop_cluster(&key) {
                    unlinked.push((key.clone(), n));
                }
            }
        }
        for (key, n) in unlinked {
            if let Some(other) = self.psgs.get_mut(&n) {
                other.overlay.unlink(&key, peer);
            }
        }
        for join in &outcome.joined {
            let key = self.server.cluster_key(&domain, &join.attribute);
            if let Some(psg) = self.psgs.get_mut(&peer) {
                psg.overlay.neighbors.entry(key.clone()).or_default();
                for n in &join.neighbors {
                    psg.overlay.link(&key, *n, now);
                }
            }
            for n in &join.neighbors {
                if let Some(other) = self.psgs.get_mut(n) {
                    other.on_join(&key, peer, now);
                }
            }
        }
        Ok(outcome)
    }

    /// Registers through REGISTER / ACK / JOIN messages and reports the four
    /// registration phases in simulated time.
    pub fn register_via_network(&mut self, profile: SpaceProfile) -> Result<(PeerId, PhaseTiming), SimError> {
        let address = profile.address.clone();
        let start = self.clock;
        self.registrations.insert(
            address.clone(),
            RegistrationTrack {
                marks: vec![start],
                ..Default::default()
            },
        );
        let template = render_template(&profile.schema);
        // The PSG object exists before the server knows it; its id is
        // assigned when the ACK comes back.
        let placeholder = PeerId(u64::MAX);
        let lat = self.latency();
        self.send(Node::Peer(placeholder), Node::Server, Message::Register { address: address.clone(), template }, lat);
        self.pending_profiles.insert(address.clone(), profile);
        while !self.registrations.get(&address).is_some_and(|t| t.done) {
            if !self.step()? {
                return Err(SimError::Invariant(format!("registration of {address} stalled")));
            }
        }
        let track = self.registrations.remove(&address).expect("tracked");
        let peer = track.peer.expect("acked");
        if track.marks.len() != REGISTRATION_PHASES.len() + 1 {
            return Err(SimError::Invariant(format!("registration marks {:?}", track.marks)));
        }
        Ok((peer, PhaseTiming::from_marks(&REGISTRATION_PHASES, &track.marks)))
    }

    /// Parses, validates, plans and issues a query at the current clock.
    pub fn issue_query(&mut self, text: &str, ttl: u32) -> Result<u64, SimError> {
        let ast = parse_with_ttl(text, ttl).map_err(|e| SimError::Query(e.to_string()))?;
        let typed = validate(&ast, self.server.globals.values()).map_err(|errs| {
            SimError::Query(errs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))
        })?;
        let plan = plan(&typed);
        let issued = self.clock;
        let parsed = issued + self.config.cost_query_parse_ms;
        let looked_up = parsed + self.config.cost_space_lookup_ms;
        let quiet = self.config.quiescence();
        let d = self.server.start_query(&plan, issued, quiet, SERVER_ADDRESS)?;
        if let Some(c) = self.server.collectors.get_mut(&d.query_id) {
            c.last_activity = looked_up;
            if matches!(c.mode, LookupMode::Subscribe { lifetime_ms: None }) {
                c.min_close = issued + self.config.horizon_ms;
            }
        }
        let hop_latency = self.draw_hop_latencies(d.query_id, plan.scan().ttl);
        self.queries.insert(
            d.query_id,
            QueryTrack {
                ttl: plan.scan().ttl,
                hop_latency,
                issued_at: issued,
                lookup_done_at: looked_up,
                request: Some(d.request.clone()),
                ..Default::default()
            },
        );
        let lat = self.latency();
        let delay = looked_up - issued + lat;
        let req = d.request;
        self.send(Node::Server, Node::Csg(d.domain), Message::for_request(req), delay);
        Ok(d.query_id)
    }

    /// The four query phases of a closed query.
    pub fn query_timing(&self, query_id: u64) -> Option<PhaseTiming> {
        let t = self.queries.get(&query_id)?;
        let c = self.server.collectors.get(&query_id)?;
        let closed = c.closed_at?;
        let parsed = t.issued_at + self.config.cost_query_parse_ms;
        let entry = t.entry_at.unwrap_or(closed).min(closed);
        Some(PhaseTiming::from_marks(
            &QUERY_PHASES,
            &[t.issued_at, parsed, t.lookup_done_at, entry, closed],
        ))
    }

    pub fn results(&self, query_id: u64) -> &[ResultTuple] {
        self.server.collectors.get(&query_id).map_or(&[], |c| &c.results)
    }

    pub fn notifications(&self, query_id: u64) -> &[Notification] {
        self.server.collectors.get(&query_id).map_or(&[], |c| &c.notifications)
    }

    pub fn query_kind(&self, query_id: u64) -> Option<QueryKind> {
        self.server.collectors.get(&query_id).map(|c| match c.mode {
            LookupMode::Subscribe { .. } => QueryKind::Subscribe,
            _ => QueryKind::Select,
        })
    }

    /// sha256 over the serialized world (server, gateways, clock, config).
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(&(&self.config, self.clock, &self.server, &self.psgs, &self.departed))
            .expect("world serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn live_peers(&self) -> impl Iterator<Item = &PsgState> {
        self.psgs.values().filter(|p| !self.departed.contains(&p.id))
    }

    pub fn trace_lines(&self) -> Option<&[String]> {
        self.trace.lines.as_deref()
    }
}
