//! Context query language: data-collection (`SELECT`, optionally `CONT`)
//! and event-subscription (`SUBSCRIBE`) queries over one context domain.
//!
//! ```text
//! query      := select | subscribe
//! select     := "SELECT" ["CONT"] proj "FROM" ident [where] [cont_tail]
//! subscribe  := "SUBSCRIBE" ident "FROM" ident [where] [lifetime]
//! proj       := ident ("," ident)*
//! where      := "WHERE" atom ("AND" atom)*
//! atom       := ident op literal
//! cont_tail  := "SAMPLE" "PERIOD" duration "LIFETIME" duration
//! lifetime   := "LIFETIME" duration
//! duration   := integer unit
//! literal    := string | number | "true" | "false"
//! ```
//!
//! Keywords are case-insensitive. The TTL is not part of the surface syntax;
//! it travels on the AST as an execution parameter.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matcher::SchemaMapping;
use crate::model::{AttributeDef, AttributeValue, CompareOp, GlobalSchema, Predicate, ValueKind};

mod lexer;
mod parser;

pub use parser::is_keyword;

/// Default hop budget for flooded lookups.
pub const DEFAULT_TTL: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryKind {
    Select,
    Subscribe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeUnit {
    Millis,
    Seconds,
    Minutes,
    Hours,
}

impl TimeUnit {
    pub fn parse(word: &str) -> Option<Self> {
        Some(match word.to_ascii_lowercase().as_str() {
            "ms" => TimeUnit::Millis,
            "s" | "sec" | "secs" => TimeUnit::Seconds,
            "min" | "mins" => TimeUnit::Minutes,
            "hour" | "hours" => TimeUnit::Hours,
            _ => return None,
        })
    }

    pub fn factor_ms(self) -> u64 {
        match self {
            TimeUnit::Millis => 1,
            TimeUnit::Seconds => 1_000,
            TimeUnit::Minutes => 60_000,
            TimeUnit::Hours => 3_600_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Duration {
    pub magnitude: u64,
    pub unit: TimeUnit,
}

impl Duration {
    pub fn millis(&self) -> u64 {
        self.magnitude.saturating_mul(self.unit.factor_ms())
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = match (self.unit, self.magnitude == 1) {
            (TimeUnit::Millis, _) => "ms",
            (TimeUnit::Seconds, _) => "s",
            (TimeUnit::Minutes, _) => "min",
            (TimeUnit::Hours, true) => "hour",
            (TimeUnit::Hours, false) => "hours",
        };
        write!(f, "{} {}", self.magnitude, unit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAst {
    pub kind: QueryKind,
    pub continuous: bool,
    pub projection: Vec<String>,
    pub domain: String,
    pub predicate: Predicate,
    pub sample_period: Option<Duration>,
    pub lifetime: Option<Duration>,
    pub ttl: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{column}: syntax error: found {found}, expected one of [{}]", expected.join(", "))]
    Syntax {
        line: usize,
        column: usize,
        found: String,
        expected: Vec<String>,
    },
    #[error("{line}:{column}: {message}")]
    Lex {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{line}:{column}: unknown time unit `{unit}`")]
    UnknownUnit {
        line: usize,
        column: usize,
        unit: String,
    },
    #[error("{line}:{column}: duration magnitude must be a non-negative integer, got {text}")]
    NonIntegerMagnitude {
        line: usize,
        column: usize,
        text: String,
    },
    #[error("ttl must be at least 1")]
    ZeroTtl,
}

pub fn parse(text: &str) -> Result<QueryAst, ParseError> {
    parse_with_ttl(text, DEFAULT_TTL)
}

pub fn parse_with_ttl(text: &str, ttl: u32) -> Result<QueryAst, ParseError> {
    if ttl == 0 {
        return Err(ParseError::ZeroTtl);
    }
    let toks = lexer::tokenize(text)?;
    parser::Parser::new(toks).query(ttl)
}

pub fn parse_duration(text: &str) -> Result<Duration, ParseError> {
    let toks = lexer::tokenize(text)?;
    let mut p = parser::Parser::new(toks);
    let d = p.duration()?;
    p.expect_eof(&[])?;
    Ok(d)
}

pub fn render_literal(v: &AttributeValue, out: &mut String) {
    match v {
        AttributeValue::Text(s) => {
            out.push('"');
            for c in s.chars() {
                if c == '"' || c == '\\' {
                    out.push('\\');
                }
                out.push(c);
            }
            out.push('"');
        }
        AttributeValue::Number(n) => out.push_str(&n.to_string()),
        AttributeValue::Boolean(b) => out.push_str(if *b { "true" } else { "false" }),
        // No list literal in the grammar; render as a quoted joined string.
        AttributeValue::ListOfText(items) => render_literal(&AttributeValue::Text(items.join(",")), out),
    }
}

/// Canonical one-line rendering; `parse(render(ast))` reproduces `ast` when
/// the AST carries the default TTL.
pub fn render(ast: &QueryAst) -> String {
    let mut out = String::new();
    match ast.kind {
        QueryKind::Select => {
            out.push_str("SELECT ");
            if ast.continuous {
                out.push_str("CONT ");
            }
        }
        QueryKind::Subscribe => out.push_str("SUBSCRIBE "),
    }
    out.push_str(&ast.projection.join(", "));
    out.push_str(" FROM ");
    out.push_str(&ast.domain);
    for (i, atom) in ast.predicate.atoms.iter().enumerate() {
        out.push_str(if i == 0 { " WHERE " } else { " AND " });
        out.push_str(&atom.attribute);
        out.push(' ');
        out.push_str(atom.op.symbol());
        out.push(' ');
        render_literal(&atom.literal, &mut out);
    }
    if let Some(period) = &ast.sample_period {
        out.push_str(&format!(" SAMPLE PERIOD {period}"));
    }
    if let Some(lifetime) = &ast.lifetime {
        out.push_str(&format!(" LIFETIME {lifetime}"));
    }
    out
}

impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("unknown-domain {0}")]
    UnknownDomain(String),
    #[error("unknown-attribute {domain}.{attribute}")]
    UnknownAttribute { domain: String, attribute: String },
    #[error("kind-mismatch on {attribute}: attribute is {expected}, literal is {found}")]
    KindMismatch {
        attribute: String,
        expected: ValueKind,
        found: ValueKind,
    },
    #[error("unsupported-operator {op} on {kind} attribute {attribute}")]
    UnsupportedOperator {
        attribute: String,
        op: CompareOp,
        kind: ValueKind,
    },
    #[error("subscribe-on-non-event {0}")]
    SubscribeOnNonEvent(String),
}

/// A query resolved against the global schemas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypedQuery {
    pub ast: QueryAst,
    pub schema: GlobalSchema,
    pub projection: Vec<AttributeDef>,
}

pub fn validate<'a, I>(ast: &QueryAst, globals: I) -> Result<TypedQuery, Vec<ValidationError>>
where
    I: IntoIterator<Item = &'a GlobalSchema>,
{
    let Some(schema) = globals.into_iter().find(|g| g.domain_name == ast.domain) else {
        return Err(vec![ValidationError::UnknownDomain(ast.domain.clone())]);
    };
    let mut errors = Vec::new();
    let unknown = |attribute: &str| ValidationError::UnknownAttribute {
        domain: ast.domain.clone(),
        attribute: attribute.to_string(),
    };
    let mut projection = Vec::new();
    for name in &ast.projection {
        match schema.attribute(name) {
            Some(def) => {
                if ast.kind == QueryKind::Subscribe && !def.is_event {
                    errors.push(ValidationError::SubscribeOnNonEvent(name.clone()));
                }
                projection.push(def.clone());
            }
            None => errors.push(unknown(name)),
        }
    }
    for atom in &ast.predicate.atoms {
        let Some(def) = schema.attribute(&atom.attribute) else {
            errors.push(unknown(&atom.attribute));
            continue;
        };
        if atom.literal.kind() != def.kind {
            errors.push(ValidationError::KindMismatch {
                attribute: atom.attribute.clone(),
                expected: def.kind,
                found: atom.literal.kind(),
            });
        } else if !atom.op.supported_on(def.kind) {
            errors.push(ValidationError::UnsupportedOperator {
                attribute: atom.attribute.clone(),
                op: atom.op,
                kind: def.kind,
            });
        }
    }
    if errors.is_empty() {
        Ok(TypedQuery {
            ast: ast.clone(),
            schema: schema.clone(),
            projection,
        })
    } else {
        Err(errors)
    }
}

/// A query expressed in a space's local vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalQuery {
    pub ast: QueryAst,
    /// Global names with no local counterpart; atoms over them are unsatisfiable.
    pub unmapped: BTreeSet<String>,
}

/// Renames every global attribute (and the domain) to the space's local
/// names. Names the mapping does not know pass through and are flagged.
pub fn rewrite_to_local(ast: &QueryAst, mapping: &SchemaMapping) -> LocalQuery {
    let mut unmapped = BTreeSet::new();
    let mut rename = |name: &str| match mapping.local_name(name) {
        Some(local) => local.to_string(),
        None => {
            unmapped.insert(name.to_string());
            name.to_string()
        }
    };
    let mut out = ast.clone();
    for p in &mut out.projection {
        *p = rename(p);
    }
    for atom in &mut out.predicate.atoms {
        atom.attribute = rename(&atom.attribute);
    }
    if ast.domain == mapping.global_domain {
        out.domain = mapping.local_domain.clone();
    }
    LocalQuery { ast: out, unmapped }
}

#[cfg(test)]
mod tests;
