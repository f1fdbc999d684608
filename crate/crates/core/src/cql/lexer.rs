use crate::model::CompareOp;

use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Tok {
    Word(String),
    Str(String),
    /// Numeric literal with its source text, so durations can reject `1.5`.
    Num(f64, String),
    Comma,
    Op(CompareOp),
    Eof,
}

impl Tok {
    pub(crate) fn describe(&self) -> String {
        match self {
            Tok::Word(w) => format!("`{w}`"),
            Tok::Str(s) => format!("string \"{s}\""),
            Tok::Num(_, text) => format!("number {text}"),
            Tok::Comma => "`,`".into(),
            Tok::Op(op) => format!("`{op}`"),
            Tok::Eof => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Spanned {
    pub tok: Tok,
    pub line: usize,
    pub column: usize,
}

pub(crate) fn tokenize(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);

    macro_rules! bump {
        () => {{
            let c = chars[i];
            i += 1;
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        }};
    }

    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            bump!();
            continue;
        }
        let (start_line, start_col) = (line, col);
        let tok = if c.is_ascii_alphabetic() || c == '_' {
            let mut w = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                w.push(bump!());
            }
            Tok::Word(w)
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let mut text = String::new();
            text.push(bump!());
            while i < chars.len() && chars[i].is_ascii_digit() {
                text.push(bump!());
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                text.push(bump!());
                while i < chars.len() && chars[i].is_ascii_digit() {
                    text.push(bump!());
                }
            }
            let value: f64 = text.parse().map_err(|_| ParseError::Lex {
                line: start_line,
                column: start_col,
                message: format!("bad number {text}"),
            })?;
            if !value.is_finite() {
                return Err(ParseError::Lex {
                    line: start_line,
                    column: start_col,
                    message: format!("number out of range: {text}"),
                });
            }
            Tok::Num(value, text)
        } else if c == '"' || c == '\u{201C}' {
            let close = if c == '"' { '"' } else { '\u{201D}' };
            bump!();
            let mut s = String::new();
            loop {
                if i >= chars.len() {
                    return Err(ParseError::Lex {
                        line: start_line,
                        column: start_col,
                        message: "unterminated string literal".into(),
                    });
                }
                let ch = bump!();
                if ch == close {
                    break;
                }
                if ch == '\\' && close == '"' {
                    match chars.get(i) {
                        Some('"') | Some('\\') => s.push(bump!()),
                        _ => {
                            return Err(ParseError::Lex {
                                line,
                                column: col,
                                message: "unsupported escape (only \\\" and \\\\)".into(),
                            })
                        }
                    }
                } else {
                    s.push(ch);
                }
            }
            Tok::Str(s)
        } else {
            bump!();
            let next = chars.get(i).copied();
            match (c, next) {
                (',', _) => Tok::Comma,
                ('=', _) => Tok::Op(CompareOp::Eq),
                ('!', Some('=')) => {
                    bump!();
                    Tok::Op(CompareOp::Ne)
                }
                ('<', Some('=')) => {
                    bump!();
                    Tok::Op(CompareOp::Le)
                }
                ('>', Some('=')) => {
                    bump!();
                    Tok::Op(CompareOp::Ge)
                }
                ('<', _) => Tok::Op(CompareOp::Lt),
                ('>', _) => Tok::Op(CompareOp::Gt),
                _ => {
                    return Err(ParseError::Lex {
                        line: start_line,
                        column: start_col,
                        message: format!("unexpected character {c:?}"),
                    })
                }
            }
        };
        out.push(Spanned {
            tok,
            line: start_line,
            column: start_col,
        });
    }
    out.push(Spanned {
        tok: Tok::Eof,
        line,
        column: col,
    });
    Ok(out)
}
