//! Server-side planning and registration, and the gateway-side query
//! processor.
//!
//! Both sides are plain state machines: they consume a message (or a timer)
//! and return what they want to send. Delivery, clocks and latency belong to
//! whoever drives them, normally [`crate::simnet`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cql::{QueryKind, TypedQuery};
use crate::matcher::MatchError;
use crate::model::{PeerId, Predicate, SchemaViolation};
use crate::model::xml::TemplateError;
use crate::overlay::{LookupMode, OverlayError};

mod psg;
mod server;
pub mod wire;

pub use psg::{psg_evaluate, ContextRecord, ContinuousJob, PsgOutput, PsgState, Subscription, DEFAULT_SEEN_CAPACITY};
pub use server::{expected_samples, Collector, Dispatch, PeerRecord, Registration, ReviewOutcome, ServerState, UpdateReport, SERVER_ADDRESS};
pub use wire::{Message, Notification, RegisterAck, ResultTuple, ScEntry};

pub const REGISTRATION_PHASES: [&str; 4] = [
    "registration_request",
    "schema_matching",
    "return_sc_list",
    "p2p_connection_establishment",
];

pub const QUERY_PHASES: [&str; 4] = ["parse", "space_lookup", "cluster_lookup", "p2p_search"];

/// Labelled simulated-time spans of one operation, in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub spans: Vec<(String, u64)>,
}

impl PhaseTiming {
    /// Builds spans from consecutive boundaries: `marks[i]..marks[i+1]` is
    /// labelled `labels[i]`.
    pub fn from_marks(labels: &[&str], marks: &[u64]) -> Self {
        assert_eq!(labels.len() + 1, marks.len(), "one more mark than labels");
        PhaseTiming {
            spans: labels
                .iter()
                .zip(marks.windows(2))
                .map(|(l, w)| (l.to_string(), w[1].saturating_sub(w[0])))
                .collect(),
        }
    }

    pub fn total(&self) -> u64 {
        self.spans.iter().map(|(_, v)| v).sum()
    }

    pub fn get(&self, label: &str) -> Option<u64> {
        self.spans.iter().find(|(l, _)| l == label).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,sim_ms\n");
        for (l, v) in &self.spans {
            out.push_str(&format!("{l},{v}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub domain: String,
    pub predicate: Predicate,
    pub projection: Vec<String>,
    pub ttl: u32,
    pub mode: LookupMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanNode {
    Project { names: Vec<String>, input: Box<PlanNode> },
    Scan(Scan),
}

/// Operator tree. Tuples stream upward from the scans; selection is pushed
/// into each scan and runs at the gateways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub root: PlanNode,
}

impl QueryPlan {
    pub fn scans(&self) -> Vec<&Scan> {
        let mut out = Vec::new();
        let mut node = &self.root;
        loop {
            match node {
                PlanNode::Project { input, .. } => node = input,
                PlanNode::Scan(s) => {
                    out.push(s);
                    return out;
                }
            }
        }
    }

    pub fn scan(&self) -> &Scan {
        self.scans()[0]
    }
}

impl fmt::Display for PlanNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanNode::Project { names, input } => write!(f, "Project[{}] -> {input}", names.join(", ")),
            PlanNode::Scan(s) => {
                let pred: Vec<String> = s
                    .predicate
                    .atoms
                    .iter()
                    .map(|a| {
                        let mut lit = String::new();
                        crate::cql::render_literal(&a.literal, &mut lit);
                        format!("{} {} {lit}", a.attribute, a.op.symbol())
                    })
                    .collect();
                let pred = if pred.is_empty() { "true".to_string() } else { pred.join(" AND ") };
                write!(f, "Scan({}, {}, ttl={})", s.domain, pred, s.ttl)
            }
        }
    }
}

impl fmt::Display for QueryPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

pub fn plan(query: &TypedQuery) -> QueryPlan {
    let ast = &query.ast;
    let millis = |d: &Option<crate::cql::Duration>| d.as_ref().map(|d| d.millis());
    let mode = match (ast.kind, ast.continuous) {
        (QueryKind::Subscribe, _) => LookupMode::Subscribe {
            lifetime_ms: millis(&ast.lifetime),
        },
        (QueryKind::Select, true) => LookupMode::Continuous {
            sample_period_ms: millis(&ast.sample_period).unwrap_or(0),
            lifetime_ms: millis(&ast.lifetime).unwrap_or(0),
        },
        (QueryKind::Select, false) => LookupMode::OneShot,
    };
    QueryPlan {
        root: PlanNode::Project {
            names: ast.projection.clone(),
            input: Box::new(PlanNode::Scan(Scan {
                domain: ast.domain.clone(),
                predicate: ast.predicate.clone(),
                projection: ast.projection.clone(),
                ttl: ast.ttl,
                mode,
            })),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("malformed schema template: {0}")]
    Template(#[from] TemplateError),
    #[error("invalid schema: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Schema(Vec<SchemaViolation>),
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("unknown peer {0}")]
    UnknownPeer(PeerId),
    #[error("unknown query {0}")]
    UnknownQuery(u64),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `query_id,peer,attr...` rows; empty cells for missing values. Streamed
/// rows (continuous samples) carry a trailing `sim_ms` column.
pub fn results_csv(projection: &[String], rows: &[ResultTuple], with_time: bool) -> String {
    let mut out = String::from("query_id,peer");
    for p in projection {
        out.push(',');
        out.push_str(&csv_cell(p));
    }
    if with_time {
        out.push_str(",sim_ms");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{}", r.query_id, r.peer));
        for v in &r.values {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&csv_cell(&v.to_string()));
            }
        }
        if with_time {
            out.push_str(&format!(",{}", r.timestamp));
        }
        out.push('\n');
    }
    out
}

pub fn notifications_csv(event: &str, rows: &[Notification]) -> String {
    let mut out = format!("query_id,peer,{},sim_ms\n", csv_cell(event));
    for n in rows {
        out.push_str(&format!("{},{},{},{}\n", n.query_id, n.peer, n.value, n.timestamp));
    }
    out
}

#[cfg(test)]
mod tests;
