//! Name-based schema matcher.
//!
//! Attribute matching runs the linguistic criteria in decreasing order of
//! their current weight; the first one that fires yields the candidate.
//! Schema matching integrates a local schema into the global schema sharing
//! the largest set of matched attributes. Non-exact candidates wait in a
//! review queue, and every review decision re-estimates the firing
//! criterion's weight from its recent precision.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AttributeDef, GlobalSchema, LocalSchema, PeerId};

pub mod linguistic;

pub use linguistic::{stem, tokens, NameForm, SynonymDict, SynonymParseError};

/// Global schemas keyed by domain name.
pub type Globals = BTreeMap<String, GlobalSchema>;

/// Minimum fraction of a local schema's attributes that must match a global
/// schema before the local schema is folded into it.
pub const INTEGRATION_THRESHOLD: f64 = 0.5;

pub const DEFAULT_WINDOW: usize = 50;

/// Declaration order is the precedence used to break weight ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CriterionId {
    Exact,
    Stem,
    Substring,
    Synonym,
}

impl CriterionId {
    pub const ALL: [CriterionId; 4] = [
        CriterionId::Exact,
        CriterionId::Stem,
        CriterionId::Substring,
        CriterionId::Synonym,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CriterionId::Exact => "exact",
            CriterionId::Stem => "stem",
            CriterionId::Substring => "substring",
            CriterionId::Synonym => "synonym",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        CriterionId::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: CriterionId,
    /// Most recent review outcomes, newest last; `true` = confirmed.
    pub window: VecDeque<bool>,
    pub hits: u64,
    pub confirms: u64,
    pub rejects: u64,
}

impl Criterion {
    fn new(id: CriterionId) -> Self {
        Criterion {
            id,
            window: VecDeque::new(),
            hits: 0,
            confirms: 0,
            rejects: 0,
        }
    }

    /// Weight as an exact ratio: `(confirms_in_window + 1) / (decisions_in_window + 2)`,
    /// or `1/1` for the pinned exact criterion.
    pub fn weight_ratio(&self) -> (u64, u64) {
        if self.id == CriterionId::Exact {
            return (1, 1);
        }
        let confirms = self.window.iter().filter(|c| **c).count() as u64;
        (confirms + 1, self.window.len() as u64 + 2)
    }

    pub fn weight(&self) -> f64 {
        let (num, den) = self.weight_ratio();
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateStatus {
    Pending,
    Confirmed,
    Rejected,
}

impl CandidateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CandidateStatus::Pending => "pending",
            CandidateStatus::Confirmed => "confirmed",
            CandidateStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub local_name: String,
    pub global_domain: String,
    pub global_name: String,
    pub criterion: CriterionId,
    pub score: f64,
    pub status: CandidateStatus,
}

impl MatchCandidate {
    /// One review-queue line: `local  DOMAIN.global  criterion  score  status`.
    pub fn queue_line(&self) -> String {
        format!(
            "{}  {}.{}  {}  {:.4}  {}",
            self.local_name,
            self.global_domain,
            self.global_name,
            self.criterion,
            self.score,
            self.status.as_str()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Confirm,
    Reject,
}

/// A candidate awaiting administrator review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: u64,
    pub peer: Option<PeerId>,
    pub candidate: MatchCandidate,
    /// Lost a provisional conflict at registration time.
    pub conflict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherState {
    pub criteria: Vec<Criterion>,
    pub synonyms: SynonymDict,
    pub queue: Vec<ReviewItem>,
    pub window_size: usize,
    next_id: u64,
}

impl Default for MatcherState {
    fn default() -> Self {
        MatcherState::new(SynonymDict::seed(), DEFAULT_WINDOW)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatchError {
    #[error("candidate {0} is not pending")]
    NotPending(u64),
    #[error("conflict: {first} and {second} both confirmed onto {domain}.{global}")]
    Conflict {
        domain: String,
        global: String,
        first: String,
        second: String,
    },
    #[error("pending candidate for {0} has no decision")]
    MissingDecision(String),
    #[error("unknown global domain {0}")]
    UnknownDomain(String),
    #[error("global domain {0} already exists")]
    DomainExists(String),
}

impl MatcherState {
    pub fn new(synonyms: SynonymDict, window_size: usize) -> Self {
        MatcherState {
            criteria: CriterionId::ALL.into_iter().map(Criterion::new).collect(),
            synonyms,
            queue: Vec::new(),
            window_size: window_size.max(1),
            next_id: 1,
        }
    }

    pub fn criterion(&self, id: CriterionId) -> &Criterion {
        &self.criteria[id as usize]
    }

    fn criterion_mut(&mut self, id: CriterionId) -> &mut Criterion {
        &mut self.criteria[id as usize]
    }

    pub fn weight(&self, id: CriterionId) -> f64 {
        self.criterion(id).weight()
    }

    /// Criteria in firing order: weight descending, then precedence.
    pub fn firing_order(&self) -> Vec<CriterionId> {
        let mut ids = CriterionId::ALL.to_vec();
        ids.sort_by(|a, b| {
            let (an, ad) = self.criterion(*a).weight_ratio();
            let (bn, bd) = self.criterion(*b).weight_ratio();
            // exact rational comparison of bn/bd vs an/ad
            (bn * ad).cmp(&(an * bd)).then(a.cmp(b))
        });
        ids
    }

    /// Records that a candidate was produced by registration; exact ones are
    /// confirmed on the spot, the rest join the review queue.
    pub fn record(&mut self, peer: Option<PeerId>, candidate: &MatchCandidate, conflict: bool) -> Option<u64> {
        let c = self.criterion_mut(candidate.criterion);
        c.hits += 1;
        if candidate.status == CandidateStatus::Confirmed {
            c.confirms += 1;
            return None;
        }
        let id = self.next_id;
        self.next_id += 1;
        self.queue.push(ReviewItem {
            id,
            peer,
            candidate: candidate.clone(),
            conflict,
        });
        Some(id)
    }

    pub fn pending(&self, id: u64) -> Option<&ReviewItem> {
        self.queue.iter().find(|i| i.id == id)
    }
}

/// Ranks candidate matches of one local attribute against global attributes.
pub fn match_attribute<'a, I>(local: &AttributeDef, globals: I, state: &MatcherState) -> Vec<MatchCandidate>
where
    I: IntoIterator<Item = (&'a str, &'a AttributeDef)>,
{
    let order = state.firing_order();
    let local_form = NameForm::new(&local.name);
    let mut out: Vec<MatchCandidate> = globals
        .into_iter()
        .filter_map(|(domain, g)| candidate(local, &local_form, domain, g, &NameForm::new(&g.name), state, &order))
        .collect();
    rank(&mut out);
    out
}

fn candidate(
    local: &AttributeDef,
    local_form: &NameForm,
    domain: &str,
    global: &AttributeDef,
    global_form: &NameForm,
    state: &MatcherState,
    order: &[CriterionId],
) -> Option<MatchCandidate> {
    if global.kind != local.kind {
        return None;
    }
    let criterion = order
        .iter()
        .copied()
        .find(|c| linguistic::fires(*c, local_form, global_form, &state.synonyms))?;
    Some(MatchCandidate {
        local_name: local.name.clone(),
        global_domain: domain.to_string(),
        global_name: global.name.clone(),
        criterion,
        score: state.weight(criterion),
        status: if criterion == CriterionId::Exact {
            CandidateStatus::Confirmed
        } else {
            CandidateStatus::Pending
        },
    })
}

/// Best candidate for `local` among `globals`, whose name forms are given
/// alongside so callers matching many attributes tokenize each global once.
fn best_match(
    local: &AttributeDef,
    domain: &str,
    globals: &[(&AttributeDef, NameForm)],
    state: &MatcherState,
    order: &[CriterionId],
) -> Option<MatchCandidate> {
    let local_form = NameForm::new(&local.name);
    let mut found: Vec<MatchCandidate> = globals
        .iter()
        .filter_map(|(g, form)| candidate(local, &local_form, domain, g, form, state, order))
        .collect();
    rank(&mut found);
    found.into_iter().next()
}

fn rank(candidates: &mut [MatchCandidate]) {
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.criterion.cmp(&b.criterion))
            .then_with(|| a.global_domain.cmp(&b.global_domain))
            .then_with(|| a.global_name.cmp(&b.global_name))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProposalTarget {
    Integrate(String),
    CreateNew,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationProposal {
    pub local: LocalSchema,
    pub target: ProposalTarget,
    /// Best candidate in the target schema for each matched local
    /// attribute, in local attribute order.
    pub matches: Vec<MatchCandidate>,
}

impl IntegrationProposal {
    pub fn target_domain(&self) -> &str {
        match &self.target {
            ProposalTarget::Integrate(d) => d,
            ProposalTarget::CreateNew => &self.local.domain_name,
        }
    }

    pub fn pending(&self) -> impl Iterator<Item = &MatchCandidate> {
        self.matches.iter().filter(|m| m.status == CandidateStatus::Pending)
    }
}

/// 2 = same name, 1 = synonymous name, 0 = unrelated.
pub fn domain_similarity(a: &str, b: &str, synonyms: &SynonymDict) -> u8 {
    let (fa, fb) = (NameForm::new(a), NameForm::new(b));
    if linguistic::fires(CriterionId::Exact, &fa, &fb, synonyms) {
        2
    } else if linguistic::fires(CriterionId::Synonym, &fa, &fb, synonyms) {
        1
    } else {
        0
    }
}

pub fn required_matches(local_attrs: usize) -> usize {
    ((INTEGRATION_THRESHOLD * local_attrs as f64).ceil() as usize).max(1)
}

pub fn match_schema(local: &LocalSchema, globals: &Globals, state: &MatcherState) -> IntegrationProposal {
    let required = required_matches(local.attributes.len());
    let order = state.firing_order();
    let mut best: Option<(usize, u8, &str, Vec<MatchCandidate>)> = None;
    let mut same_name: Option<(&str, Vec<MatchCandidate>)> = None;

    for (domain, schema) in globals {
        let forms: Vec<(&AttributeDef, NameForm)> =
            schema.attributes.iter().map(|g| (g, NameForm::new(&g.name))).collect();
        let matches: Vec<MatchCandidate> = local
            .attributes
            .iter()
            .filter_map(|attr| best_match(attr, domain, &forms, state, &order))
            .collect();
        let count = matches.len();
        let similarity = domain_similarity(&local.domain_name, domain, &state.synonyms);
        if *domain == local.domain_name {
            same_name = Some((domain, matches.clone()));
        }
        if count < required {
            continue;
        }
        // BTreeMap iteration is lexicographic, so strict improvement keeps
        // the smallest name among equals.
        let better = match &best {
            None => true,
            Some((bc, bs, _, _)) => (count, similarity) > (*bc, *bs),
        };
        if better {
            best = Some((count, similarity, domain, matches));
        }
    }

    let (target, matches) = match (best, same_name) {
        (Some((_, _, domain, matches)), _) => (ProposalTarget::Integrate(domain.to_string()), matches),
        // A schema with the very same domain name absorbs the space even
        // below threshold; a second global with that name cannot exist.
        (None, Some((domain, matches))) => (ProposalTarget::Integrate(domain.to_string()), matches),
        (None, None) => (ProposalTarget::CreateNew, Vec::new()),
    };
    IntegrationProposal {
        local: local.clone(),
        target,
        matches,
    }
}

/// Records a review decision and re-estimates the firing criterion's weight.
pub fn apply_decision(state: &mut MatcherState, id: u64, decision: Decision) -> Result<ReviewItem, MatchError> {
    let pos = state
        .queue
        .iter()
        .position(|i| i.id == id)
        .ok_or(MatchError::NotPending(id))?;
    let mut item = state.queue.remove(pos);
    let window = state.window_size;
    let c = state.criterion_mut(item.candidate.criterion);
    let confirmed = decision == Decision::Confirm;
    if confirmed {
        c.confirms += 1;
    } else {
        c.rejects += 1;
    }
    if c.id != CriterionId::Exact {
        c.window.push_back(confirmed);
        while c.window.len() > window {
            c.window.pop_front();
        }
    }
    item.candidate.status = if confirmed {
        CandidateStatus::Confirmed
    } else {
        CandidateStatus::Rejected
    };
    Ok(item)
}

/// Bijective global ↔ local attribute mapping for one registered space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaMapping {
    pub peer: PeerId,
    pub global_domain: String,
    pub local_domain: String,
    /// global name → local name
    pub pairs: BTreeMap<String, String>,
}

impl SchemaMapping {
    pub fn identity(peer: PeerId, schema: &LocalSchema) -> Self {
        SchemaMapping {
            peer,
            global_domain: schema.domain_name.clone(),
            local_domain: schema.domain_name.clone(),
            pairs: schema
                .attributes
                .iter()
                .map(|a| (a.name.clone(), a.name.clone()))
                .collect(),
        }
    }

    pub fn local_name(&self, global: &str) -> Option<&str> {
        self.pairs.get(global).map(String::as_str)
    }

    pub fn global_name(&self, local: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(_, l)| l.as_str() == local)
            .map(|(g, _)| g.as_str())
    }

    pub fn inverse(&self) -> SchemaMapping {
        SchemaMapping {
            peer: self.peer,
            global_domain: self.local_domain.clone(),
            local_domain: self.global_domain.clone(),
            pairs: self.pairs.iter().map(|(g, l)| (l.clone(), g.clone())).collect(),
        }
    }

    pub fn is_bijective(&self) -> bool {
        let locals: BTreeSet<&String> = self.pairs.values().collect();
        locals.len() == self.pairs.len()
    }

    /// Bijective and total over exactly the local schema's attributes.
    pub fn covers(&self, local: &LocalSchema) -> bool {
        let locals: BTreeSet<&str> = self.pairs.values().map(String::as_str).collect();
        let expected: BTreeSet<&str> = local.attributes.iter().map(|a| a.name.as_str()).collect();
        self.is_bijective() && locals == expected
    }

    pub fn global_attributes(&self) -> impl Iterator<Item = &str> {
        self.pairs.keys().map(String::as_str)
    }
}

pub fn fresh_name(schema: &GlobalSchema, base: &str) -> String {
    if !schema.has_attribute(base) {
        return base.to_string();
    }
    (2..)
        .map(|n| format!("{base}_{n}"))
        .find(|n| !schema.has_attribute(n))
        .expect("unbounded")
}

/// Applies a proposal: confirmed pairs enter the mapping, every other local
/// attribute is appended to the target schema under its own name.
pub fn integrate(
    globals: &Globals,
    proposal: &IntegrationProposal,
    decisions: &BTreeMap<String, Decision>,
    peer: PeerId,
) -> Result<(Globals, SchemaMapping), MatchError> {
    let mut out = globals.clone();
    let local = &proposal.local;
    let domain = match &proposal.target {
        ProposalTarget::CreateNew => {
            if out.contains_key(&local.domain_name) {
                return Err(MatchError::DomainExists(local.domain_name.clone()));
            }
            let mut schema = GlobalSchema::from_local(local);
            schema.member_count = 1;
            out.insert(local.domain_name.clone(), schema);
            return Ok((out, SchemaMapping::identity(peer, local)));
        }
        ProposalTarget::Integrate(d) => d.clone(),
    };
    let schema = out
        .get_mut(&domain)
        .ok_or_else(|| MatchError::UnknownDomain(domain.clone()))?;

    let mut pairs: BTreeMap<String, String> = BTreeMap::new();
    for m in &proposal.matches {
        let accepted = match m.status {
            CandidateStatus::Confirmed => true,
            CandidateStatus::Rejected => false,
            CandidateStatus::Pending => match decisions.get(&m.local_name) {
                Some(d) => *d == Decision::Confirm,
                None => return Err(MatchError::MissingDecision(m.local_name.clone())),
            },
        };
        if !accepted {
            continue;
        }
        if let Some(first) = pairs.get(&m.global_name) {
            return Err(MatchError::Conflict {
                domain: domain.clone(),
                global: m.global_name.clone(),
                first: first.clone(),
                second: m.local_name.clone(),
            });
        }
        pairs.insert(m.global_name.clone(), m.local_name.clone());
    }

    let mapped: BTreeSet<String> = pairs.values().cloned().collect();
    for attr in local.attributes.iter().filter(|a| !mapped.contains(&a.name)) {
        let reusable = schema
            .attribute(&attr.name)
            .is_some_and(|g| g.kind == attr.kind && !pairs.contains_key(&attr.name));
        let name = if reusable {
            attr.name.clone()
        } else {
            let name = fresh_name(schema, &attr.name);
            schema.attributes.push(AttributeDef {
                name: name.clone(),
                ..attr.clone()
            });
            name
        };
        pairs.insert(name, attr.name.clone());
    }
    schema.member_count += 1;
    Ok((
        out,
        SchemaMapping {
            peer,
            global_domain: domain,
            local_domain: local.domain_name.clone(),
            pairs,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("review line {line}: {message}")]
pub struct QueueParseError {
    pub line: usize,
    pub message: String,
}

/// A parsed review-queue line.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueLine {
    pub local_name: String,
    pub global_domain: String,
    pub global_name: String,
    pub criterion: CriterionId,
    pub score: f64,
    pub status: CandidateStatus,
}

impl QueueLine {
    pub fn matches(&self, c: &MatchCandidate) -> bool {
        self.local_name == c.local_name
            && self.global_domain == c.global_domain
            && self.global_name == c.global_name
            && self.criterion == c.criterion
    }
}

/// Reads the dump format back; `#` comments and blank lines are skipped.
pub fn parse_queue(text: &str) -> Result<Vec<QueueLine>, QueueParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: &str| QueueParseError {
            line: i + 1,
            message: message.to_string(),
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [local, target, criterion, score, status] = cols[..] else {
            return Err(err("expected 5 columns"));
        };
        let (domain, global) = target
            .split_once('.')
            .ok_or_else(|| err("target must be DOMAIN.attribute"))?;
        let criterion = CriterionId::parse(criterion).ok_or_else(|| err("unknown criterion"))?;
        let score: f64 = score.parse().map_err(|_| err("bad score"))?;
        let status = match status {
            "pending" => CandidateStatus::Pending,
            "confirmed" => CandidateStatus::Confirmed,
            "rejected" => CandidateStatus::Rejected,
            _ => return Err(err("status must be pending|confirmed|rejected")),
        };
        out.push(QueueLine {
            local_name: local.to_string(),
            global_domain: domain.to_string(),
            global_name: global.to_string(),
            criterion,
            score,
            status,
        });
    }
    Ok(out)
}
