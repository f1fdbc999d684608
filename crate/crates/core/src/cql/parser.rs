use crate::model::{Atom, AttributeValue, Predicate};

use super::lexer::{Spanned, Tok};
use super::{Duration, ParseError, QueryAst, QueryKind, TimeUnit};

const KEYWORDS: &[&str] = &[
    "SELECT", "CONT", "FROM", "WHERE", "AND", "SUBSCRIBE", "SAMPLE", "PERIOD", "LIFETIME", "TRUE",
    "FALSE",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(word))
}

pub(crate) struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    pub(crate) fn new(toks: Vec<Spanned>) -> Self {
        Parser { toks, pos: 0 }
    }

    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn advance(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if !matches!(t.tok, Tok::Eof) {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &[&str]) -> ParseError {
        let t = self.peek();
        ParseError::Syntax {
            line: t.line,
            column: t.column,
            found: t.tok.describe(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.at_keyword(kw) {
            self.advance();
            Ok(())
        } else {
            Err(self.error(&[kw]))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match &self.peek().tok {
            Tok::Word(w) if !is_keyword(w) => {
                let w = w.clone();
                self.advance();
                Ok(w)
            }
            _ => Err(self.error(&["identifier"])),
        }
    }

    pub(crate) fn expect_eof(&self, alternatives: &[&str]) -> Result<(), ParseError> {
        if matches!(self.peek().tok, Tok::Eof) {
            Ok(())
        } else {
            let mut expected = alternatives.to_vec();
            expected.push("end of input");
            Err(self.error(&expected))
        }
    }

    pub(crate) fn query(&mut self, ttl: u32) -> Result<QueryAst, ParseError> {
        if self.at_keyword("SELECT") {
            self.advance();
            self.select(ttl)
        } else if self.at_keyword("SUBSCRIBE") {
            self.advance();
            self.subscribe(ttl)
        } else {
            Err(self.error(&["SELECT", "SUBSCRIBE"]))
        }
    }

    fn select(&mut self, ttl: u32) -> Result<QueryAst, ParseError> {
        let continuous = if self.at_keyword("CONT") {
            self.advance();
            true
        } else {
            false
        };
        let mut projection = vec![self.ident()?];
        while matches!(self.peek().tok, Tok::Comma) {
            self.advance();
            projection.push(self.ident()?);
        }
        self.expect_keyword("FROM")?;
        let domain = self.ident()?;
        let predicate = self.opt_where()?;
        let (mut sample_period, mut lifetime) = (None, None);
        if continuous {
            if !self.at_keyword("SAMPLE") {
                let mut expected = vec!["SAMPLE"];
                if predicate.is_trivial() {
                    expected.insert(0, "WHERE");
                } else {
                    expected.insert(0, "AND");
                }
                return Err(self.error(&expected));
            }
            self.advance();
            self.expect_keyword("PERIOD")?;
            sample_period = Some(self.duration()?);
            self.expect_keyword("LIFETIME")?;
            lifetime = Some(self.duration()?);
            self.expect_eof(&[])?;
        } else if predicate.is_trivial() {
            self.expect_eof(&["WHERE"])?;
        } else {
            self.expect_eof(&["AND"])?;
        }
        Ok(QueryAst {
            kind: QueryKind::Select,
            continuous,
            projection,
            domain,
            predicate,
            sample_period,
            lifetime,
            ttl,
        })
    }

    fn subscribe(&mut self, ttl: u32) -> Result<QueryAst, ParseError> {
        let event = self.ident()?;
        self.expect_keyword("FROM")?;
        let domain = self.ident()?;
        let predicate = self.opt_where()?;
        let lifetime = if self.at_keyword("LIFETIME") {
            self.advance();
            Some(self.duration()?)
        } else {
            None
        };
        if lifetime.is_some() {
            self.expect_eof(&[])?;
        } else if predicate.is_trivial() {
            self.expect_eof(&["WHERE", "LIFETIME"])?;
        } else {
            self.expect_eof(&["AND", "LIFETIME"])?;
        }
        Ok(QueryAst {
            kind: QueryKind::Subscribe,
            continuous: false,
            projection: vec![event],
            domain,
            predicate,
            sample_period: None,
            lifetime,
            ttl,
        })
    }

    fn opt_where(&mut self) -> Result<Predicate, ParseError> {
        let mut predicate = Predicate::always();
        if !self.at_keyword("WHERE") {
            return Ok(predicate);
        }
        self.advance();
        predicate.atoms.push(self.atom()?);
        while self.at_keyword("AND") {
            self.advance();
            predicate.atoms.push(self.atom()?);
        }
        Ok(predicate)
    }

    fn atom(&mut self) -> Result<Atom, ParseError> {
        let attribute = self.ident()?;
        let op = match self.peek().tok {
            Tok::Op(op) => {
                self.advance();
                op
            }
            _ => return Err(self.error(&["=", "!=", "<", "<=", ">", ">="])),
        };
        let literal = match &self.peek().tok {
            Tok::Str(s) => AttributeValue::Text(s.clone()),
            Tok::Num(n, _) => AttributeValue::Number(*n),
            Tok::Word(w) if w.eq_ignore_ascii_case("true") => AttributeValue::Boolean(true),
            Tok::Word(w) if w.eq_ignore_ascii_case("false") => AttributeValue::Boolean(false),
            _ => return Err(self.error(&["string", "number", "true", "false"])),
        };
        self.advance();
        Ok(Atom {
            attribute,
            op,
            literal,
        })
    }

    pub(crate) fn duration(&mut self) -> Result<Duration, ParseError> {
        let t = self.peek().clone();
        let magnitude = match &t.tok {
            Tok::Num(_, text) => {
                let magnitude = text.parse::<u64>().map_err(|_| ParseError::NonIntegerMagnitude {
                    line: t.line,
                    column: t.column,
                    text: text.clone(),
                })?;
                self.advance();
                magnitude
            }
            _ => return Err(self.error(&["integer"])),
        };
        let u = self.peek().clone();
        let unit = match &u.tok {
            Tok::Word(w) => TimeUnit::parse(w).ok_or_else(|| ParseError::UnknownUnit {
                line: u.line,
                column: u.column,
                unit: w.clone(),
            })?,
            _ => return Err(self.error(&["time unit"])),
        };
        self.advance();
        Ok(Duration { magnitude, unit })
    }
}
