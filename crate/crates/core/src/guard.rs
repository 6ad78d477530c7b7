//! A small side-effect-free guard language shared by compensating automata and
//! trigger monitors.
//!
//! Grammar: a conjunction of comparisons, each side a sum of atoms.
//!
//! ```text
//! guard := cmp ("&&" cmp)*
//! cmp   := sum op sum            op ∈ {==, !=, <, <=, >, >=}
//! sum   := atom (("+" | "-") atom)*
//! atom  := integer | true | false | 'string' | identifier
//! ```
//!
//! Identifiers resolve through an [`Env`]. A name that does not resolve, or a
//! comparison across incompatible types, makes the guard unsatisfied rather
//! than an error: monitors routinely guard on payload keys that only some
//! events carry.

use std::fmt;

use crate::error::SpecError;
use crate::event::Scalar;

/// Name resolution for guard evaluation.
pub trait Env {
    fn lookup(&self, name: &str) -> Option<Scalar>;
}

impl Env for crate::event::Event {
    fn lookup(&self, name: &str) -> Option<Scalar> {
        Event::lookup(self, name)
    }
}

use crate::event::Event;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Atom {
    Lit(Scalar),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Sum {
    /// (sign, atom); the first sign is always +1.
    terms: Vec<(i64, Atom)>,
}

impl Sum {
    fn eval(&self, env: &dyn Env) -> Option<Scalar> {
        // A single term may be any scalar; multi-term sums must be integer.
        if self.terms.len() == 1 {
            return match &self.terms[0].1 {
                Atom::Lit(s) => Some(s.clone()),
                Atom::Name(n) => env.lookup(n),
            };
        }
        let mut acc = 0i64;
        for (sign, atom) in &self.terms {
            let v = match atom {
                Atom::Lit(s) => s.clone(),
                Atom::Name(n) => env.lookup(n)?,
            };
            match v {
                Scalar::Int(n) => acc += sign * n,
                _ => return None,
            }
        }
        Some(Scalar::Int(acc))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Cmp {
    lhs: Sum,
    op: CmpOp,
    rhs: Sum,
}

impl Cmp {
    fn eval(&self, env: &dyn Env) -> bool {
        let (Some(l), Some(r)) = (self.lhs.eval(env), self.rhs.eval(env)) else {
            return false;
        };
        match (&l, &r) {
            (Scalar::Int(a), Scalar::Int(b)) => match self.op {
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
                CmpOp::Lt => a < b,
                CmpOp::Le => a <= b,
                CmpOp::Gt => a > b,
                CmpOp::Ge => a >= b,
            },
            (Scalar::Str(a), Scalar::Str(b)) => match self.op {
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
                _ => false,
            },
            (Scalar::Bool(a), Scalar::Bool(b)) => match self.op {
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
                _ => false,
            },
            _ => false,
        }
    }
}

/// A compiled guard expression. The empty guard is always satisfied.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Guard {
    cmps: Vec<Cmp>,
    source: String,
}

impl Guard {
    /// The always-true guard.
    pub fn always() -> Self {
        Guard::default()
    }

    pub fn parse(input: &str) -> Result<Self, SpecError> {
        let input = input.trim();
        if input.is_empty() {
            return Ok(Guard::always());
        }
        let mut cmps = Vec::new();
        for part in input.split("&&") {
            cmps.push(parse_cmp(part.trim(), input)?);
        }
        Ok(Guard { cmps, source: input.to_string() })
    }

    pub fn eval(&self, env: &dyn Env) -> bool {
        self.cmps.iter().all(|c| c.eval(env))
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

fn guard_err(input: &str, detail: &str) -> SpecError {
    SpecError::InvalidGuard { input: input.to_string(), detail: detail.to_string() }
}

fn parse_cmp(part: &str, whole: &str) -> Result<Cmp, SpecError> {
    // Two-char operators first so `<=` is not read as `<`.
    const OPS: [(&str, CmpOp); 6] = [
        ("==", CmpOp::Eq),
        ("!=", CmpOp::Ne),
        ("<=", CmpOp::Le),
        (">=", CmpOp::Ge),
        ("<", CmpOp::Lt),
        (">", CmpOp::Gt),
    ];
    for (sym, op) in OPS {
        if let Some(idx) = part.find(sym) {
            let lhs = parse_sum(part[..idx].trim(), whole)?;
            let rhs = parse_sum(part[idx + sym.len()..].trim(), whole)?;
            return Ok(Cmp { lhs, op, rhs });
        }
    }
    Err(guard_err(whole, "comparison operator not found"))
}

fn parse_sum(text: &str, whole: &str) -> Result<Sum, SpecError> {
    if text.is_empty() {
        return Err(guard_err(whole, "empty operand"));
    }
    let mut terms = Vec::new();
    let mut sign = 1i64;
    let mut rest = text;
    loop {
        rest = rest.trim_start();
        let (atom, consumed) = parse_atom(rest, whole)?;
        terms.push((sign, atom));
        rest = rest[consumed..].trim_start();
        if rest.is_empty() {
            break;
        }
        sign = match rest.as_bytes()[0] {
            b'+' => 1,
            b'-' => -1,
            _ => return Err(guard_err(whole, "expected '+' or '-' between terms")),
        };
        rest = &rest[1..];
    }
    Ok(Sum { terms })
}

fn parse_atom(text: &str, whole: &str) -> Result<(Atom, usize), SpecError> {
    let bytes = text.as_bytes();
    if bytes.is_empty() {
        return Err(guard_err(whole, "expected operand"));
    }
    if bytes[0] == b'\'' {
        let end = text[1..]
            .find('\'')
            .ok_or_else(|| guard_err(whole, "unterminated string literal"))?;
        let lit = text[1..1 + end].to_string();
        return Ok((Atom::Lit(Scalar::Str(lit)), end + 2));
    }
    if bytes[0].is_ascii_digit() {
        let len = bytes.iter().take_while(|b| b.is_ascii_digit()).count();
        let n: i64 = text[..len]
            .parse()
            .map_err(|_| guard_err(whole, "integer literal out of range"))?;
        return Ok((Atom::Lit(Scalar::Int(n)), len));
    }
    let len = bytes
        .iter()
        .take_while(|b| b.is_ascii_alphanumeric() || **b == b'_')
        .count();
    if len == 0 {
        return Err(guard_err(whole, "unexpected character in operand"));
    }
    let word = &text[..len];
    let atom = match word {
        "true" => Atom::Lit(Scalar::Bool(true)),
        "false" => Atom::Lit(Scalar::Bool(false)),
        _ => Atom::Name(word.to_string()),
    };
    Ok((atom, len))
}

/// Parses a literal value in the guard-atom syntax (used by monitor `set`
/// actions): `42`, `true`, `'white'`.
pub fn parse_literal(text: &str) -> Result<Scalar, SpecError> {
    let text = text.trim();
    let (atom, consumed) = parse_atom(text, text)?;
    if consumed != text.len() {
        return Err(guard_err(text, "trailing input after literal"));
    }
    match atom {
        Atom::Lit(s) => Ok(s),
        Atom::Name(_) => Err(guard_err(text, "expected a literal, got an identifier")),
    }
}
