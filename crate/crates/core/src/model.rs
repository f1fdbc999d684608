//! Attribute-value context model shared by every other module.
//!
//! A physical space describes itself with a [`LocalSchema`]; the server keeps
//! one [`GlobalSchema`] per context domain. Values are typed
//! ([`AttributeValue`]) and compared with [`compare`], which is the single
//! place where WHERE-clause semantics live.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod xml;

/// The four value kinds of the context model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueKind {
    Text,
    Number,
    Boolean,
    ListOfText,
}

impl ValueKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::Text => "text",
            ValueKind::Number => "number",
            ValueKind::Boolean => "boolean",
            ValueKind::ListOfText => "list-of-text",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "text" => ValueKind::Text,
            "number" => ValueKind::Number,
            "boolean" => ValueKind::Boolean,
            "list-of-text" => ValueKind::ListOfText,
            _ => return None,
        })
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A typed context value. Numbers are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum AttributeValue {
    Text(String),
    Number(f64),
    Boolean(bool),
    ListOfText(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("number value must be finite, got {0}")]
pub struct NonFiniteNumber(pub f64);

impl AttributeValue {
    pub fn text(s: impl Into<String>) -> Self {
        AttributeValue::Text(s.into())
    }

    pub fn number(n: f64) -> Result<Self, NonFiniteNumber> {
        if n.is_finite() {
            Ok(AttributeValue::Number(n))
        } else {
            Err(NonFiniteNumber(n))
        }
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            AttributeValue::Text(_) => ValueKind::Text,
            AttributeValue::Number(_) => ValueKind::Number,
            AttributeValue::Boolean(_) => ValueKind::Boolean,
            AttributeValue::ListOfText(_) => ValueKind::ListOfText,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        !matches!(self, AttributeValue::Number(n) if !n.is_finite())
    }
}

impl fmt::Display for AttributeValue {
    /// CSV-friendly rendering: lists are `;`-joined.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::Text(s) => f.write_str(s),
            AttributeValue::Number(n) => write!(f, "{n}"),
            AttributeValue::Boolean(b) => write!(f, "{b}"),
            AttributeValue::ListOfText(items) => f.write_str(&items.join(";")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    pub const ALL: [CompareOp; 6] = [
        CompareOp::Eq,
        CompareOp::Ne,
        CompareOp::Lt,
        CompareOp::Le,
        CompareOp::Gt,
        CompareOp::Ge,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }

    pub fn is_ordering(self) -> bool {
        !matches!(self, CompareOp::Eq | CompareOp::Ne)
    }

    /// Whether `compare` accepts this operator for operands of `kind`.
    pub fn supported_on(self, kind: ValueKind) -> bool {
        !self.is_ordering() || kind == ValueKind::Number
    }
}

impl fmt::Display for CompareOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("kind mismatch: value is {value}, literal is {literal}")]
    KindMismatch { value: ValueKind, literal: ValueKind },
    #[error("operator {op} is not supported on {kind} values")]
    UnsupportedOperator { op: CompareOp, kind: ValueKind },
}

/// Typed comparison of a stored value against a query literal.
///
/// Text is exact and case-sensitive; lists compare as sets and only support
/// `=`/`!=`; ordering operators need numbers on both sides.
pub fn compare(
    value: &AttributeValue,
    op: CompareOp,
    literal: &AttributeValue,
) -> Result<bool, CompareError> {
    use AttributeValue::*;
    if value.kind() != literal.kind() {
        return Err(CompareError::KindMismatch {
            value: value.kind(),
            literal: literal.kind(),
        });
    }
    if !op.supported_on(value.kind()) {
        return Err(CompareError::UnsupportedOperator {
            op,
            kind: value.kind(),
        });
    }
    let equal = match (value, literal) {
        (Number(a), Number(b)) => {
            return Ok(match op {
                CompareOp::Eq => a == b,
                CompareOp::Ne => a != b,
                CompareOp::Lt => a < b,
                CompareOp::Le => a <= b,
                CompareOp::Gt => a > b,
                CompareOp::Ge => a >= b,
            })
        }
        (Text(a), Text(b)) => a == b,
        (Boolean(a), Boolean(b)) => a == b,
        (ListOfText(a), ListOfText(b)) => {
            a.iter().collect::<BTreeSet<_>>() == b.iter().collect::<BTreeSet<_>>()
        }
        _ => unreachable!("kinds checked above"),
    };
    Ok(if op == CompareOp::Eq { equal } else { !equal })
}

/// One comparison `attribute op literal`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub attribute: String,
    pub op: CompareOp,
    pub literal: AttributeValue,
}

impl Atom {
    pub fn new(attribute: impl Into<String>, op: CompareOp, literal: AttributeValue) -> Self {
        Atom {
            attribute: attribute.into(),
            op,
            literal,
        }
    }
}

/// Conjunction of atoms; the empty conjunction matches everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub atoms: Vec<Atom>,
}

impl Predicate {
    pub fn always() -> Self {
        Predicate::default()
    }

    pub fn single(atom: Atom) -> Self {
        Predicate { atoms: vec![atom] }
    }

    pub fn is_trivial(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Evaluates against a value lookup. A missing value or a failing
    /// comparison makes the atom unsatisfied.
    pub fn eval_with<F>(&self, mut lookup: F) -> bool
    where
        F: FnMut(&str) -> Option<AttributeValue>,
    {
        self.atoms.iter().all(|atom| {
            lookup(&atom.attribute)
                .map(|v| compare(&v, atom.op, &atom.literal).unwrap_or(false))
                .unwrap_or(false)
        })
    }

    pub fn attributes(&self) -> impl Iterator<Item = &str> {
        self.atoms.iter().map(|a| a.attribute.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub kind: ValueKind,
    #[serde(default)]
    pub is_event: bool,
    #[serde(default)]
    pub is_private: bool,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, kind: ValueKind) -> Self {
        AttributeDef {
            name: name.into(),
            kind,
            is_event: false,
            is_private: false,
        }
    }

    pub fn event(name: impl Into<String>) -> Self {
        AttributeDef {
            is_event: true,
            ..AttributeDef::new(name, ValueKind::Boolean)
        }
    }

    pub fn private(mut self) -> Self {
        self.is_private = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalSchema {
    pub domain_name: String,
    pub attributes: Vec<AttributeDef>,
    pub parent_domain: Option<String>,
}

impl LocalSchema {
    pub fn new(domain_name: impl Into<String>, attributes: Vec<AttributeDef>) -> Self {
        LocalSchema {
            domain_name: domain_name.into(),
            attributes,
            parent_domain: None,
        }
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalSchema {
    pub domain_name: String,
    /// Kept in creation order; rings lay out clusters in this order.
    pub attributes: Vec<AttributeDef>,
    pub member_count: u64,
}

impl GlobalSchema {
    pub fn from_local(local: &LocalSchema) -> Self {
        GlobalSchema {
            domain_name: local.domain_name.clone(),
            attributes: local.attributes.clone(),
            member_count: 0,
        }
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn has_attribute(&self, name: &str) -> bool {
        self.attribute(name).is_some()
    }
}

/// Opaque peer identity. Display addresses are kept by the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PeerId(pub u64);

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psg-{}", self.0)
    }
}

/// Synthetic data provider standing in for sensors and legacy databases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Fixed(AttributeValue),
    /// `(time_ms, value)` steps; the value holds from its time until the next
    /// step. Sorted by time, first step at or before the first read.
    Script(Vec<(u64, AttributeValue)>),
}

impl DataSource {
    pub fn value_at(&self, now: u64) -> Option<AttributeValue> {
        match self {
            DataSource::Fixed(v) => Some(v.clone()),
            DataSource::Script(steps) => steps
                .iter()
                .take_while(|(t, _)| *t <= now)
                .last()
                .map(|(_, v)| v.clone()),
        }
    }

    /// Times at which the value may change (after t = 0).
    pub fn change_times(&self) -> Vec<u64> {
        match self {
            DataSource::Fixed(_) => Vec::new(),
            DataSource::Script(steps) => steps.iter().map(|(t, _)| *t).filter(|t| *t > 0).collect(),
        }
    }

    fn values(&self) -> Vec<&AttributeValue> {
        match self {
            DataSource::Fixed(v) => vec![v],
            DataSource::Script(steps) => steps.iter().map(|(_, v)| v).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceProfile {
    pub address: String,
    pub schema: LocalSchema,
    pub data: BTreeMap<String, DataSource>,
    /// Local reasoner: event attribute → rule over the space's own attributes.
    pub event_rules: BTreeMap<String, Predicate>,
}

impl SpaceProfile {
    pub fn new(address: impl Into<String>, schema: LocalSchema) -> Self {
        SpaceProfile {
            address: address.into(),
            schema,
            data: BTreeMap::new(),
            event_rules: BTreeMap::new(),
        }
    }

    pub fn with_value(mut self, attr: &str, value: AttributeValue) -> Self {
        self.data.insert(attr.to_string(), DataSource::Fixed(value));
        self
    }

    pub fn with_source(mut self, attr: &str, source: DataSource) -> Self {
        self.data.insert(attr.to_string(), source);
        self
    }

    pub fn with_rule(mut self, event: &str, rule: Predicate) -> Self {
        self.event_rules.insert(event.to_string(), rule);
        self
    }

    /// Current value of a local attribute: event attributes come from their
    /// rule, everything else from the data provider.
    pub fn value_at(&self, attr: &str, now: u64) -> Option<AttributeValue> {
        if let Some(rule) = self.event_rules.get(attr) {
            let fired = rule.eval_with(|a| self.raw_value(a, now));
            return Some(AttributeValue::Boolean(fired));
        }
        self.raw_value(attr, now)
    }

    fn raw_value(&self, attr: &str, now: u64) -> Option<AttributeValue> {
        self.data.get(attr).and_then(|src| src.value_at(now))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaViolation {
    #[error("empty domain name")]
    EmptyDomainName,
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("duplicate-attribute {0:?}")]
    DuplicateAttribute(String),
    #[error("event-not-boolean {0:?}")]
    EventNotBoolean(String),
    #[error("parent domain equals the domain itself ({0:?})")]
    ParentIsSelf(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileViolation {
    #[error(transparent)]
    Schema(#[from] SchemaViolation),
    #[error("data key {0:?} is not a schema attribute")]
    UnknownDataKey(String),
    #[error("event rule {0:?} does not name an event attribute")]
    UnknownEvent(String),
    #[error("event rule {event:?} references {attribute:?}, which is not a plain attribute")]
    BadRuleReference { event: String, attribute: String },
    #[error("data for {0:?} has the wrong kind or a non-finite number")]
    BadValue(String),
}

/// Name tokens: `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

pub fn validate_schema(schema: &LocalSchema) -> Vec<SchemaViolation> {
    let mut out = Vec::new();
    if schema.domain_name.is_empty() {
        out.push(SchemaViolation::EmptyDomainName);
    } else if !is_valid_name(&schema.domain_name) {
        out.push(SchemaViolation::InvalidName(schema.domain_name.clone()));
    }
    if let Some(parent) = &schema.parent_domain {
        if parent == &schema.domain_name {
            out.push(SchemaViolation::ParentIsSelf(parent.clone()));
        } else if !is_valid_name(parent) {
            out.push(SchemaViolation::InvalidName(parent.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    for attr in &schema.attributes {
        if !is_valid_name(&attr.name) {
            out.push(SchemaViolation::InvalidName(attr.name.clone()));
        }
        if !seen.insert(attr.name.as_str()) {
            out.push(SchemaViolation::DuplicateAttribute(attr.name.clone()));
        }
        if attr.is_event && attr.kind != ValueKind::Boolean {
            out.push(SchemaViolation::EventNotBoolean(attr.name.clone()));
        }
    }
    out
}

pub fn validate_profile(profile: &SpaceProfile) -> Vec<ProfileViolation> {
    let mut out: Vec<ProfileViolation> = validate_schema(&profile.schema)
        .into_iter()
        .map(ProfileViolation::from)
        .collect();
    for (key, source) in &profile.data {
        match profile.schema.attribute(key) {
            None => out.push(ProfileViolation::UnknownDataKey(key.clone())),
            Some(def) => {
                if source
                    .values()
                    .iter()
                    .any(|v| v.kind() != def.kind || !v.is_well_formed())
                {
                    out.push(ProfileViolation::BadValue(key.clone()));
                }
            }
        }
    }
    for (event, rule) in &profile.event_rules {
        match profile.schema.attribute(event) {
            Some(def) if def.is_event => {}
            _ => out.push(ProfileViolation::UnknownEvent(event.clone())),
        }
        for attr in rule.attributes() {
            let plain = profile
                .schema
                .attribute(attr)
                .map(|d| !d.is_event)
                .unwrap_or(false);
            if !plain {
                out.push(ProfileViolation::BadRuleReference {
                    event: event.clone(),
                    attribute: attr.to_string(),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person() -> LocalSchema {
        LocalSchema::new(
            "PERSON",
            vec![
                AttributeDef::new("name", ValueKind::Text),
                AttributeDef::new("location", ValueKind::Text),
                AttributeDef::new("friend_list", ValueKind::ListOfText),
            ],
        )
    }

    #[test]
    fn person_schema_is_valid() {
        assert!(validate_schema(&person()).is_empty());
    }

    #[test]
    fn duplicate_attribute_is_reported() {
        let mut s = person();
        s.attributes.push(AttributeDef::new("name", ValueKind::Text));
        assert_eq!(
            validate_schema(&s),
            vec![SchemaViolation::DuplicateAttribute("name".into())]
        );
    }

    #[test]
    fn text_event_is_reported() {
        let mut s = person();
        s.attributes[1].is_event = true;
        assert_eq!(
            validate_schema(&s),
            vec![SchemaViolation::EventNotBoolean("location".into())]
        );
    }

    #[test]
    fn parent_must_differ() {
        let mut s = person();
        s.parent_domain = Some("PERSON".into());
        assert_eq!(
            validate_schema(&s),
            vec![SchemaViolation::ParentIsSelf("PERSON".into())]
        );
    }

    #[test]
    fn compare_examples() {
        let keith = AttributeValue::text("Keith");
        assert_eq!(compare(&keith, CompareOp::Eq, &keith), Ok(true));
        let five = AttributeValue::Number(5.0);
        assert_eq!(compare(&five, CompareOp::Lt, &five), Ok(false));
        assert_eq!(
            compare(
                &AttributeValue::Boolean(true),
                CompareOp::Eq,
                &AttributeValue::Number(1.0)
            ),
            Err(CompareError::KindMismatch {
                value: ValueKind::Boolean,
                literal: ValueKind::Number
            })
        );
        assert!(matches!(
            compare(&keith, CompareOp::Lt, &keith),
            Err(CompareError::UnsupportedOperator { .. })
        ));
    }

    #[test]
    fn text_is_case_sensitive_and_lists_are_sets() {
        let a = AttributeValue::text("Keith");
        let b = AttributeValue::text("keith");
        assert_eq!(compare(&a, CompareOp::Eq, &b), Ok(false));
        let l1 = AttributeValue::ListOfText(vec!["a".into(), "b".into()]);
        let l2 = AttributeValue::ListOfText(vec!["b".into(), "a".into(), "a".into()]);
        assert_eq!(compare(&l1, CompareOp::Eq, &l2), Ok(true));
        assert_eq!(compare(&l1, CompareOp::Ne, &l2), Ok(false));
    }

    #[test]
    fn non_finite_numbers_are_rejected() {
        assert!(AttributeValue::number(f64::NAN).is_err());
        assert!(AttributeValue::number(f64::INFINITY).is_err());
        assert!(AttributeValue::number(1.5).is_ok());
    }

    #[test]
    fn event_rule_drives_event_value() {
        let schema = LocalSchema::new(
            "OFFICE",
            vec![
                AttributeDef::new("occupancy", ValueKind::Number),
                AttributeDef::event("isVacant"),
            ],
        );
        let profile = SpaceProfile::new("10.0.0.1", schema)
            .with_source(
                "occupancy",
                DataSource::Script(vec![
                    (0, AttributeValue::Number(3.0)),
                    (100, AttributeValue::Number(0.0)),
                ]),
            )
            .with_rule(
                "isVacant",
                Predicate::single(Atom::new("occupancy", CompareOp::Eq, AttributeValue::Number(0.0))),
            );
        assert!(validate_profile(&profile).is_empty());
        assert_eq!(profile.value_at("isVacant", 50), Some(AttributeValue::Boolean(false)));
        assert_eq!(profile.value_at("isVacant", 100), Some(AttributeValue::Boolean(true)));
    }

    #[test]
    fn rules_may_not_reference_events() {
        let schema = LocalSchema::new(
            "OFFICE",
            vec![AttributeDef::event("isVacant"), AttributeDef::event("isBusy")],
        );
        let profile = SpaceProfile::new("x", schema).with_rule(
            "isBusy",
            Predicate::single(Atom::new("isVacant", CompareOp::Eq, AttributeValue::Boolean(false))),
        );
        assert_eq!(
            validate_profile(&profile),
            vec![ProfileViolation::BadRuleReference {
                event: "isBusy".into(),
                attribute: "isVacant".into()
            }]
        );
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn value() -> impl Strategy<Value = AttributeValue> {
            prop_oneof![
                "[a-zA-Z ]{0,8}".prop_map(AttributeValue::Text),
                (-1e6f64..1e6).prop_map(AttributeValue::Number),
                any::<bool>().prop_map(AttributeValue::Boolean),
                proptest::collection::vec("[a-z]{1,4}", 0..4).prop_map(AttributeValue::ListOfText),
            ]
        }

        proptest! {
            #[test]
            fn reflexive_equality(v in value()) {
                prop_assert_eq!(compare(&v, CompareOp::Eq, &v), Ok(true));
                prop_assert_eq!(compare(&v, CompareOp::Ne, &v), Ok(false));
            }

            #[test]
            fn numbers_trichotomy(a in -1e6f64..1e6, b in -1e6f64..1e6) {
                let (x, y) = (AttributeValue::Number(a), AttributeValue::Number(b));
                let holds = [CompareOp::Lt, CompareOp::Eq, CompareOp::Gt]
                    .iter()
                    .filter(|op| compare(&x, **op, &y).unwrap())
                    .count();
                prop_assert_eq!(holds, 1);
            }
        }
    }
}
