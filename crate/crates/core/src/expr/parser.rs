//! Pratt parser for coefficient expressions.
//!
//! Binding powers, loosest to tightest: `+ -`, `* /`, unary `-`, `^`.
//! The power operator is non-associative and its exponent must fold to a
//! constant.

use super::{Expr, Func, Var};
use crate::error::ParseError;

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(v) => format!("number {v}"),
            Tok::Ident(s) => format!("identifier '{s}'"),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::Caret => "'^'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::End => "end of input".into(),
        }
    }
}

const OPERAND: &[&str] = &["number", "identifier", "'('", "'-'"];
const AFTER_OPERAND: &[&str] = &["'+'", "'-'", "'*'", "'/'", "'^'", "')'", "end of input"];

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => out.push((Tok::Plus, start)),
            b'-' => out.push((Tok::Minus, start)),
            b'*' => out.push((Tok::Star, start)),
            b'/' => out.push((Tok::Slash, start)),
            b'^' => out.push((Tok::Caret, start)),
            b'(' => out.push((Tok::LParen, start)),
            b')' => out.push((Tok::RParen, start)),
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError::Syntax {
                    offset: start,
                    found: format!("malformed number '{text}'"),
                    expected: vec!["number".into()],
                })?;
                out.push((Tok::Num(v), start));
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Tok::Ident(src[start..i].to_string()), start));
                continue;
            }
            _ => {
                let ch = src[start..].chars().next().unwrap_or('?');
                return Err(ParseError::Syntax {
                    offset: start,
                    found: format!("character '{ch}'"),
                    expected: OPERAND.iter().chain(AFTER_OPERAND).map(|s| s.to_string()).collect(),
                });
            }
        }
        i += 1;
    }
    out.push((Tok::End, src.len()));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    /// Offsets of currently unclosed '(' tokens, innermost last.
    open: Vec<usize>,
}

const BP_ADD: u8 = 1;
const BP_MUL: u8 = 3;
const BP_UNARY: u8 = 5;
const BP_POW: u8 = 7;

impl Parser {
    fn peek(&self) -> &(Tok, usize) {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self, expected: &[&str]) -> ParseError {
        let (tok, off) = self.peek();
        // running out of input inside a group is reported at the unclosed '('
        let offset = match (tok, self.open.last()) {
            (Tok::End, Some(&open)) => open,
            _ => *off,
        };
        let found = match (tok, self.open.last()) {
            (Tok::End, Some(_)) => "end of input inside unclosed '('".to_string(),
            _ => tok.describe(),
        };
        ParseError::Syntax {
            offset,
            found,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expr(&mut self, min_bp: u8) -> Result<Expr, ParseError> {
        let mut lhs = self.prefix()?;
        loop {
            let (tok, off) = self.peek().clone();
            let (lbp, rbp) = match tok {
                Tok::Plus | Tok::Minus => (BP_ADD, BP_ADD + 1),
                Tok::Star | Tok::Slash => (BP_MUL, BP_MUL + 1),
                Tok::Caret => (BP_POW, BP_POW + 1),
                Tok::RParen | Tok::End => break,
                _ => return Err(self.unexpected(AFTER_OPERAND)),
            };
            if lbp < min_bp {
                break;
            }
            self.bump();
            if tok == Tok::Caret {
                let exp_off = self.peek().1;
                let exponent = self.expr(rbp)?;
                if exponent.depends_on_any() {
                    return Err(ParseError::VariableExponent { offset: exp_off });
                }
                let p = exponent.eval(&[]).ok().filter(|v| v.is_finite()).ok_or(
                    ParseError::InvalidConstant {
                        offset: exp_off,
                        text: exponent.to_string(),
                    },
                )?;
                lhs = Expr::Pow(Box::new(lhs), p);
                if self.peek().0 == Tok::Caret {
                    return Err(ParseError::NonAssociativePower {
                        offset: self.peek().1,
                    });
                }
                continue;
            }
            let rhs = self.expr(rbp)?;
            lhs = match tok {
                Tok::Plus => Expr::Add(Box::new(lhs), Box::new(rhs)),
                Tok::Minus => Expr::Sub(Box::new(lhs), Box::new(rhs)),
                Tok::Star => Expr::Mul(Box::new(lhs), Box::new(rhs)),
                Tok::Slash => Expr::Div(Box::new(lhs), Box::new(rhs)),
                _ => unreachable!("operator token at {off}"),
            };
        }
        Ok(lhs)
    }

    fn group(&mut self) -> Result<Expr, ParseError> {
        let (_, open_off) = self.bump();
        self.open.push(open_off);
        let inner = self.expr(0)?;
        match self.peek().0 {
            Tok::RParen => {
                self.bump();
                self.open.pop();
                Ok(inner)
            }
            _ => Err(self.unexpected(&["')'"])),
        }
    }

    fn prefix(&mut self) -> Result<Expr, ParseError> {
        let (tok, off) = self.peek().clone();
        match tok {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::Minus => {
                self.bump();
                // a minus directly on a literal is part of the literal, unless
                // the literal is a power base
                if let (Tok::Num(v), Some((next, _))) = (&self.peek().0, self.toks.get(self.pos + 1)) {
                    if *next != Tok::Caret {
                        let v = -*v;
                        self.bump();
                        return Ok(Expr::Num(v));
                    }
                }
                let operand = self.expr(BP_UNARY)?;
                Ok(Expr::Neg(Box::new(operand)))
            }
            Tok::LParen => self.group(),
            Tok::Ident(name) => {
                self.bump();
                if let Some(f) = Func::from_name(&name) {
                    if self.peek().0 != Tok::LParen {
                        return Err(self.unexpected(&["'('"]));
                    }
                    let arg = self.group()?;
                    return Ok(Expr::Func(f, Box::new(arg)));
                }
                match name.as_str() {
                    "x" => Ok(Expr::Var(Var::X)),
                    "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                    _ => match fiber_index(&name) {
                        Some(k) => Ok(Expr::Var(Var::Theta(k))),
                        None => Err(ParseError::UnknownIdentifier { offset: off, name }),
                    },
                }
            }
            _ => Err(self.unexpected(OPERAND)),
        }
    }
}

fn fiber_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('t')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

/// Parses an expression over `x` and the fiber angles `t1, t2, ...`.
pub fn parse(source: &str) -> Result<Expr, ParseError> {
    if source.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let toks = lex(source)?;
    let mut p = Parser {
        toks,
        pos: 0,
        open: Vec::new(),
    };
    let e = p.expr(0)?;
    match p.peek().0 {
        Tok::End => Ok(e),
        Tok::RParen => Err(ParseError::Syntax {
            offset: p.peek().1,
            found: "unmatched ')'".into(),
            expected: AFTER_OPERAND.iter().filter(|s| **s != "')'").map(|s| s.to_string()).collect(),
        }),
        _ => Err(p.unexpected(AFTER_OPERAND)),
    }
}

/// Parses and checks that every fiber variable index is at most `fiber_dim`.
pub fn parse_in(source: &str, fiber_dim: usize) -> Result<Expr, ParseError> {
    let e = parse(source)?;
    if let Some(k) = e.max_fiber_index().filter(|&k| k > fiber_dim) {
        let name = format!("t{k}");
        let offset = source.find(&name).unwrap_or(0);
        return Err(ParseError::UnknownIdentifier { offset, name });
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syntax_offset(src: &str) -> usize {
        match parse(src) {
            Err(ParseError::Syntax { offset, .. }) => offset,
            other => panic!("expected syntax error for {src:?}, got {other:?}"),
        }
    }

    #[test]
    fn literal_power_node() {
        let e = parse("x^(-1)").unwrap();
        assert_eq!(e, Expr::Pow(Box::new(Expr::Var(Var::X)), -1.0));
    }

    #[test]
    fn intermediate_family_shape() {
        let e = parse("exp(-x - x^0.5)").unwrap();
        let Expr::Func(Func::Exp, arg) = e else {
            panic!("expected exp node")
        };
        assert_eq!(
            *arg,
            Expr::Sub(
                Box::new(Expr::Neg(Box::new(Expr::Var(Var::X)))),
                Box::new(Expr::Pow(Box::new(Expr::Var(Var::X)), 0.5))
            )
        );
    }

    #[test]
    fn unbalanced_paren_reports_open_offset() {
        assert_eq!(syntax_offset("1 + ("), 4);
        assert_eq!(syntax_offset("1 + (2"), 4);
        assert_eq!(syntax_offset("(1 + 2"), 0);
        assert_eq!(syntax_offset("1 + * 2"), 4);
        assert_eq!(syntax_offset("1 + 2)"), 5);
        match parse("1 + (") {
            Err(ParseError::Syntax { expected, .. }) => assert!(expected.contains(&"'('".to_string())),
            _ => unreachable!(),
        }
    }

    #[test]
    fn precedence() {
        assert_eq!(parse("2+3*4").unwrap().eval(&[0.0]).unwrap(), 14.0);
        assert_eq!(parse("-2^2").unwrap().eval(&[0.0]).unwrap(), -4.0);
        assert_eq!(parse("2*-3").unwrap().eval(&[0.0]).unwrap(), -6.0);
        assert_eq!(parse("8/2/2").unwrap().eval(&[0.0]).unwrap(), 2.0);
        assert_eq!(parse("2^-1*3").unwrap().eval(&[0.0]).unwrap(), 1.5);
        assert_eq!(parse("  1e-3 +   2E2 ").unwrap().eval(&[0.0]).unwrap(), 200.001);
    }

    #[test]
    fn power_rules() {
        assert!(matches!(parse("2^3^2"), Err(ParseError::NonAssociativePower { offset: 3 })));
        assert!(matches!(parse("2^x"), Err(ParseError::VariableExponent { offset: 2 })));
        assert!(matches!(parse("x^(t1)"), Err(ParseError::VariableExponent { .. })));
        assert_eq!(parse("(2^3)^2").unwrap().eval(&[0.0]).unwrap(), 64.0);
        assert_eq!(parse("x^(1/2)").unwrap().eval(&[4.0]).unwrap(), 2.0);
    }

    #[test]
    fn identifiers() {
        assert!(matches!(
            parse("y + 1"),
            Err(ParseError::UnknownIdentifier { offset: 0, .. })
        ));
        assert!(matches!(parse("t0"), Err(ParseError::UnknownIdentifier { .. })));
        assert!(matches!(parse("exp x"), Err(ParseError::Syntax { offset: 4, .. })));
        assert!(matches!(
            parse_in("sin(t2)", 1),
            Err(ParseError::UnknownIdentifier { offset: 4, .. })
        ));
        assert!(parse_in("sin(t2)", 2).is_ok());
        assert!(matches!(parse("   "), Err(ParseError::Empty)));
        assert!(matches!(parse("1 $ 2"), Err(ParseError::Syntax { offset: 2, .. })));
    }
}
