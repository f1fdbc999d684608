//! Name normalization and the four linguistic criteria.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::CriterionId;

/// Lowercased tokens of an identifier; splits on `_`, `-` and camelCase
/// boundaries (`personName` → `[person, name]`, `HTTPServer` → `[http, server]`).
pub fn tokens(name: &str) -> Vec<String> {
    let mut out = Vec::new();
    for part in name.split(['_', '-', ' ']).filter(|p| !p.is_empty()) {
        let chars: Vec<char> = part.chars().collect();
        let mut current = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let boundary = i > 0
                && c.is_uppercase()
                && (chars[i - 1].is_lowercase()
                    || chars[i - 1].is_ascii_digit()
                    || chars.get(i + 1).is_some_and(|n| n.is_lowercase()) && chars[i - 1].is_uppercase());
            if boundary && !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            current.extend(c.to_lowercase());
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Light suffix stripping: `tion→t`, `ing`, `ed`, sibilant `es`, plural `s`.
pub fn stem(token: &str) -> String {
    let t = token;
    let n = t.len();
    if n > 5 && t.ends_with("tion") {
        return format!("{}t", &t[..n - 4]);
    }
    if n > 5 && t.ends_with("ing") {
        return t[..n - 3].to_string();
    }
    if n > 4 && t.ends_with("ed") {
        return t[..n - 2].to_string();
    }
    if n > 4 && t.ends_with("es") {
        let base = &t[..n - 2];
        if ["s", "x", "z", "ch", "sh"].iter().any(|s| base.ends_with(s)) {
            return base.to_string();
        }
    }
    if n > 3 && t.ends_with('s') && !t.ends_with("ss") {
        return t[..n - 1].to_string();
    }
    t.to_string()
}

/// Symmetric token-level synonym relation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymDict {
    pairs: BTreeSet<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("synonym file line {line}: expected `tokenA<TAB>tokenB`")]
pub struct SynonymParseError {
    pub line: usize,
}

impl SynonymDict {
    pub fn seed() -> Self {
        let mut d = SynonymDict::default();
        for (a, b) in [("home", "house"), ("vacant", "empty"), ("shop", "store")] {
            d.insert(a, b);
        }
        d
    }

    pub fn insert(&mut self, a: &str, b: &str) {
        let (a, b) = (a.to_lowercase(), b.to_lowercase());
        self.pairs.insert((a.clone(), b.clone()));
        self.pairs.insert((b, a));
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.pairs.contains(&(a.to_string(), b.to_string()))
    }

    pub fn len(&self) -> usize {
        self.pairs.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// UTF-8 lines `tokenA<TAB>tokenB`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SynonymParseError> {
        let mut d = SynonymDict::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim_end();
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), None) if !a.trim().is_empty() && !b.trim().is_empty() => {
                    d.insert(a.trim(), b.trim())
                }
                _ => return Err(SynonymParseError { line: i + 1 }),
            }
        }
        Ok(d)
    }

    pub fn merge(&mut self, other: &SynonymDict) {
        self.pairs.extend(other.pairs.iter().cloned());
    }
}

/// Pre-normalized name, so criteria do not re-tokenize per comparison.
#[derive(Debug, Clone)]
pub struct NameForm {
    pub tokens: Vec<String>,
    pub stems: Vec<String>,
}

impl NameForm {
    pub fn new(name: &str) -> Self {
        let tokens = tokens(name);
        let stems = tokens.iter().map(|t| stem(t)).collect();
        NameForm { tokens, stems }
    }
}

fn covers(short: &str, long: &str) -> bool {
    short == long || (short.len() >= 3 && long.starts_with(short))
}

fn contained(a: &[String], b: &[String]) -> bool {
    a.iter().all(|x| b.iter().any(|y| covers(x, y)))
}

pub fn fires(criterion: CriterionId, a: &NameForm, b: &NameForm, synonyms: &SynonymDict) -> bool {
    if a.tokens.is_empty() || b.tokens.is_empty() {
        return false;
    }
    let exact = a.tokens == b.tokens;
    match criterion {
        CriterionId::Exact => exact,
        CriterionId::Stem => !exact && a.stems == b.stems,
        // Token containment, with a token also covering any token it is a
        // prefix of (3+ chars): `name` ⊂ `personName`, `addr` ⊂ `address`,
        // but never `on` ⊂ `location`.
        CriterionId::Substring => !exact && (contained(&a.tokens, &b.tokens) || contained(&b.tokens, &a.tokens)),
        CriterionId::Synonym => {
            !exact
                && a.tokens.len() == b.tokens.len()
                && a.tokens
                    .iter()
                    .zip(&b.tokens)
                    .all(|(x, y)| x == y || synonyms.are_synonyms(x, y))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenization() {
        assert_eq!(tokens("personName"), ["person", "name"]);
        assert_eq!(tokens("friend_list"), ["friend", "list"]);
        assert_eq!(tokens("isVacant"), ["is", "vacant"]);
        assert_eq!(tokens("HTTPServer"), ["http", "server"]);
        assert_eq!(tokens("HOME"), ["home"]);
        assert_eq!(tokens("shop_a07"), ["shop", "a07"]);
    }

    #[test]
    fn stemming() {
        assert_eq!(stem("temperatures"), "temperature");
        assert_eq!(stem("location"), "locat");
        assert_eq!(stem("located"), "locat");
        assert_eq!(stem("lighting"), "light");
        assert_eq!(stem("addresses"), "address");
        assert_eq!(stem("address"), "address");
        assert_eq!(stem("boxes"), "box");
    }

    #[test]
    fn criteria_on_demo_names() {
        let syn = SynonymDict::seed();
        let f = |c, a, b| fires(c, &NameForm::new(a), &NameForm::new(b), &syn);
        assert!(f(CriterionId::Substring, "personName", "name"));
        assert!(!f(CriterionId::Synonym, "personName", "name"));
        assert!(f(CriterionId::Substring, "addr", "address"));
        assert!(!f(CriterionId::Substring, "on", "location"));
        assert!(f(CriterionId::Synonym, "HOUSE", "HOME"));
        assert!(f(CriterionId::Stem, "temperatures", "temperature"));
        assert!(f(CriterionId::Exact, "location", "location"));
        assert!(!f(CriterionId::Stem, "location", "location"));
    }

    #[test]
    fn synonym_file_parsing() {
        let d = SynonymDict::parse("# comment\nflat\tapartment\n\ncar\tauto  # trailing\n").unwrap();
        assert!(d.are_synonyms("apartment", "flat"));
        assert!(d.are_synonyms("auto", "car"));
        assert_eq!(d.len(), 2);
        assert_eq!(SynonymDict::parse("a b\n"), Err(SynonymParseError { line: 1 }));
    }
}
