use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::server::expected_samples;
use super::wire::{Notification, RegisterAck, ResultTuple};
use super::EngineError;
use crate::matcher::SchemaMapping;
use crate::model::{compare, AttributeValue, PeerId, Predicate, SpaceProfile};
use crate::overlay::{flood_step, ClusterKey, LookupMode, LookupRequest, PeerOverlayState};

pub const DEFAULT_SEEN_CAPACITY: usize = 1024;

/// One row of the gateway's context database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub attribute: String,
    pub value: AttributeValue,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinuousJob {
    pub query_id: u64,
    pub origin: String,
    pub projection: Vec<String>,
    pub period_ms: u64,
    pub started_at: u64,
    pub end_at: u64,
    pub next_at: u64,
    pub sent: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub query_id: u64,
    pub origin: String,
    /// Global name of the event attribute.
    pub event: String,
    pub until: Option<u64>,
    pub last_value: bool,
}

/// Everything a gateway wants done after handling one lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PsgOutput {
    pub duplicate: bool,
    pub forwards: Vec<(PeerId, LookupRequest)>,
    pub result: Option<ResultTuple>,
    pub notify: Option<Notification>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsgState {
    pub id: PeerId,
    pub profile: SpaceProfile,
    pub mapping: Option<SchemaMapping>,
    pub overlay: PeerOverlayState,
    pub jobs: BTreeMap<u64, ContinuousJob>,
    pub subscriptions: BTreeMap<u64, Subscription>,
    pub store: Vec<ContextRecord>,
    /// Evaluations performed, per query id.
    pub evaluations: BTreeMap<u64, u32>,
}

impl PsgState {
    pub fn new(id: PeerId, profile: SpaceProfile) -> Self {
        PsgState {
            id,
            profile,
            mapping: None,
            overlay: PeerOverlayState::new(DEFAULT_SEEN_CAPACITY),
            jobs: BTreeMap::new(),
            subscriptions: BTreeMap::new(),
            store: Vec::new(),
            evaluations: BTreeMap::new(),
        }
    }

    /// Installs the mapping and links to the neighbours sampled for us. The
    /// JOINs telling those neighbours about us are the caller's to send.
    pub fn apply_ack(&mut self, ack: &RegisterAck, now: u64) {
        self.mapping = Some(ack.mapping.clone());
        let mapped: BTreeSet<&str> = ack.mapping.global_attributes().collect();
        let stale: Vec<ClusterKey> = self
            .overlay
            .neighbors
            .keys()
            .filter(|k| k.domain != ack.mapping.global_domain || !mapped.contains(k.attribute.as_str()))
            .cloned()
            .collect();
        for k in stale {
            self.overlay.drop_cluster(&k);
        }
        for (cluster, neighbors) in &ack.neighbors {
            self.overlay.neighbors.entry(cluster.clone()).or_default();
            for n in neighbors {
                self.overlay.link(cluster, *n, now);
            }
        }
    }

    pub fn on_join(&mut self, cluster: &ClusterKey, peer: PeerId, now: u64) {
        self.overlay.link(cluster, peer, now);
    }

    fn local_name<'a>(&'a self, global: &'a str) -> Option<&'a str> {
        self.mapping.as_ref()?.local_name(global)
    }

    /// Current value of a global attribute as this space may disclose it.
    pub fn disclosed(&self, global: &str, now: u64) -> Option<AttributeValue> {
        let local = self.local_name(global)?;
        let def = self.profile.schema.attribute(local)?;
        if def.is_private {
            return None;
        }
        self.profile.value_at(local, now)
    }

    /// Predicate over global names, checked against local data. Atoms over
    /// attributes the space lacks, cannot map or keeps private fail.
    pub fn satisfies(&self, predicate: &Predicate, now: u64) -> bool {
        predicate.atoms.iter().all(|atom| {
            self.disclosed(&atom.attribute, now)
                .is_some_and(|v| compare(&v, atom.op, &atom.literal).unwrap_or(false))
        })
    }

    pub fn project(&self, projection: &[String], now: u64) -> Vec<Option<AttributeValue>> {
        projection.iter().map(|p| self.disclosed(p, now)).collect()
    }

    fn record(&mut self, projection: &[String], values: &[Option<AttributeValue>], now: u64) {
        for (global, v) in projection.iter().zip(values) {
            if let (Some(local), Some(v)) = (self.local_name(global).map(str::to_string), v) {
                self.store.push(ContextRecord {
                    attribute: local,
                    value: v.clone(),
                    timestamp: now,
                });
            }
        }
    }

    /// Handles an incoming LOOKUP/SUBSCRIBE: duplicate suppression and
    /// forwarding, then local evaluation.
    pub fn handle_lookup(&mut self, req: &LookupRequest, from: Option<PeerId>, now: u64) -> PsgOutput {
        let step = flood_step(&mut self.overlay, req, from);
        if step.duplicate {
            return PsgOutput {
                duplicate: true,
                ..Default::default()
            };
        }
        *self.evaluations.entry(req.query_id).or_default() += 1;
        let mut out = PsgOutput {
            forwards: step.forwards,
            ..Default::default()
        };
        if !self.satisfies(&req.predicate, now) {
            return out;
        }
        match req.mode {
            LookupMode::OneShot => {
                out.result = Some(psg_tuple(self, req, now));
            }
            LookupMode::Continuous {
                sample_period_ms,
                lifetime_ms,
            } => {
                let tuple = psg_tuple(self, req, now);
                self.record(&req.projection, &tuple.values, now);
                if expected_samples(sample_period_ms, lifetime_ms) > 1 {
                    self.jobs.insert(
                        req.query_id,
                        ContinuousJob {
                            query_id: req.query_id,
                            origin: req.origin.clone(),
                            projection: req.projection.clone(),
                            period_ms: sample_period_ms,
                            started_at: now,
                            end_at: now + lifetime_ms,
                            next_at: now + sample_period_ms,
                            sent: 1,
                        },
                    );
                }
                out.result = Some(tuple);
            }
            LookupMode::Subscribe { lifetime_ms } => {
                let Some(event) = req.projection.first().cloned() else {
                    return out;
                };
                let Some(AttributeValue::Boolean(value)) = self.disclosed(&event, now) else {
                    return out;
                };
                self.store_event(&event, value, now);
                self.subscriptions.insert(
                    req.query_id,
                    Subscription {
                        query_id: req.query_id,
                        origin: req.origin.clone(),
                        event: event.clone(),
                        until: lifetime_ms.map(|l| now + l),
                        last_value: value,
                    },
                );
                out.notify = Some(Notification {
                    query_id: req.query_id,
                    peer: self.id,
                    event,
                    value,
                    timestamp: now,
                });
            }
        }
        out
    }

    fn store_event(&mut self, event: &str, value: bool, now: u64) {
        if let Some(local) = self.local_name(event).map(str::to_string) {
            self.store.push(ContextRecord {
                attribute: local,
                value: AttributeValue::Boolean(value),
                timestamp: now,
            });
        }
    }

    pub fn next_sample(&self, query_id: u64) -> Option<u64> {
        self.jobs.get(&query_id).map(|j| j.next_at)
    }

    /// Takes the sample due at `now` for a continuous job; the job retires
    /// after its last sample.
    pub fn run_continuous(&mut self, query_id: u64, now: u64) -> Option<ResultTuple> {
        let job = self.jobs.get(&query_id)?.clone();
        if now < job.next_at || job.next_at > job.end_at {
            return None;
        }
        let values = self.project(&job.projection, now);
        self.record(&job.projection, &values, now);
        let job = self.jobs.get_mut(&query_id).expect("present");
        job.sent += 1;
        job.next_at += job.period_ms;
        if job.next_at > job.end_at {
            self.jobs.remove(&query_id);
        }
        Some(ResultTuple {
            query_id,
            peer: self.id,
            values,
            timestamp: now,
        })
    }

    /// Times in `(after, until]` at which the subscription's event could
    /// change value: the change points of every attribute behind it.
    pub fn subscription_checks(&self, query_id: u64, after: u64, horizon: u64) -> Vec<u64> {
        let Some(sub) = self.subscriptions.get(&query_id) else {
            return Vec::new();
        };
        let Some(local) = self.local_name(&sub.event) else {
            return Vec::new();
        };
        let sources: Vec<&str> = match self.profile.event_rules.get(local) {
            Some(rule) => rule.attributes().collect(),
            None => vec![local],
        };
        let end = sub.until.map_or(horizon, |u| u.min(horizon));
        let times: BTreeSet<u64> = sources
            .iter()
            .filter_map(|a| self.profile.data.get(*a))
            .flat_map(|src| src.change_times())
            .filter(|t| *t > after && *t <= end)
            .collect();
        times.into_iter().collect()
    }

    /// Re-evaluates a subscribed event; NOTIFY on a value change.
    pub fn handle_subscription(&mut self, query_id: u64, now: u64) -> Option<Notification> {
        let sub = self.subscriptions.get(&query_id)?.clone();
        if sub.until.is_some_and(|u| now > u) {
            self.subscriptions.remove(&query_id);
            return None;
        }
        let Some(AttributeValue::Boolean(value)) = self.disclosed(&sub.event, now) else {
            return None;
        };
        if value == sub.last_value {
            return None;
        }
        self.subscriptions.get_mut(&query_id).expect("present").last_value = value;
        self.store_event(&sub.event, value, now);
        Some(Notification {
            query_id,
            peer: self.id,
            event: sub.event,
            value,
            timestamp: now,
        })
    }

    /// Stored records of a local attribute with `start <= t < end`.
    pub fn history_query(&self, attribute: &str, start: u64, end: u64) -> Result<Vec<(AttributeValue, u64)>, EngineError> {
        if self.profile.schema.attribute(attribute).is_none() {
            return Err(EngineError::UnknownAttribute(attribute.to_string()));
        }
        Ok(self
            .store
            .iter()
            .filter(|r| r.attribute == attribute && r.timestamp >= start && r.timestamp < end)
            .map(|r| (r.value.clone(), r.timestamp))
            .collect())
    }
}

fn psg_tuple(psg: &PsgState, req: &LookupRequest, now: u64) -> ResultTuple {
    ResultTuple {
        query_id: req.query_id,
        peer: psg.id,
        values: psg.project(&req.projection, now),
        timestamp: now,
    }
}

/// Local evaluation of a delivered request: a RESULT when the predicate
/// holds here, nothing otherwise. Does not touch flooding state.
pub fn psg_evaluate(psg: &PsgState, req: &LookupRequest, now: u64) -> Option<ResultTuple> {
    psg.satisfies(&req.predicate, now).then(|| psg_tuple(psg, req, now))
}
