//! Trigger expressions: the compositions of strategy names sent on the
//! multiplexed compensate line.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SpecError;

/// `B1`, `seq(C2, B4)`, `par(B1, C2)`, arbitrarily nested. Par children are
/// kept sorted by their canonical rendering so equal sets compare and print
/// identically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerExpr {
    Strategy(String),
    Seq(Vec<TriggerExpr>),
    Par(Vec<TriggerExpr>),
}

impl TriggerExpr {
    pub fn strategy(name: &str) -> Self {
        TriggerExpr::Strategy(name.to_string())
    }

    pub fn seq(children: Vec<TriggerExpr>) -> Self {
        TriggerExpr::Seq(children)
    }

    pub fn par(mut children: Vec<TriggerExpr>) -> Self {
        children.sort_by_key(|c| c.to_string());
        TriggerExpr::Par(children)
    }

    /// All strategy names mentioned anywhere in the expression.
    pub fn strategy_names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_names(&mut out);
        out
    }

    fn collect_names<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            TriggerExpr::Strategy(n) => out.push(n),
            TriggerExpr::Seq(cs) | TriggerExpr::Par(cs) => {
                for c in cs {
                    c.collect_names(out);
                }
            }
        }
    }

    /// Parses the textual form used in monitor spec files.
    pub fn parse(input: &str) -> Result<Self, SpecError> {
        let mut p = Parser { input: input.as_bytes(), pos: 0 };
        p.skip_ws();
        let expr = p.expr()?;
        p.skip_ws();
        if p.pos != p.input.len() {
            return Err(SpecError::InvalidTriggerExpr {
                input: input.to_string(),
                detail: format!("trailing input at byte {}", p.pos),
            });
        }
        Ok(expr)
    }
}

impl fmt::Display for TriggerExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriggerExpr::Strategy(n) => write!(f, "{n}"),
            TriggerExpr::Seq(cs) => write_children(f, "seq", cs),
            TriggerExpr::Par(cs) => write_children(f, "par", cs),
        }
    }
}

fn write_children(f: &mut fmt::Formatter<'_>, head: &str, cs: &[TriggerExpr]) -> fmt::Result {
    write!(f, "{head}(")?;
    for (i, c) in cs.iter().enumerate() {
        if i > 0 {
            write!(f, ", ")?;
        }
        write!(f, "{c}")?;
    }
    write!(f, ")")
}

struct Parser<'a> {
    input: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, detail: &str) -> SpecError {
        SpecError::InvalidTriggerExpr {
            input: String::from_utf8_lossy(self.input).into_owned(),
            detail: detail.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.input.len() && self.input[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn ident(&mut self) -> Result<String, SpecError> {
        let start = self.pos;
        while self.pos < self.input.len()
            && (self.input[self.pos].is_ascii_alphanumeric() || self.input[self.pos] == b'_')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected identifier"));
        }
        Ok(String::from_utf8_lossy(&self.input[start..self.pos]).into_owned())
    }

    fn expr(&mut self) -> Result<TriggerExpr, SpecError> {
        let name = self.ident()?;
        self.skip_ws();
        let is_call = self.pos < self.input.len() && self.input[self.pos] == b'(';
        if !is_call {
            return Ok(TriggerExpr::Strategy(name));
        }
        self.pos += 1; // '('
        let mut children = Vec::new();
        loop {
            self.skip_ws();
            children.push(self.expr()?);
            self.skip_ws();
            match self.input.get(self.pos) {
                Some(b',') => self.pos += 1,
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                _ => return Err(self.err("expected ',' or ')'")),
            }
        }
        if children.is_empty() {
            return Err(self.err("empty composition"));
        }
        match name.as_str() {
            "seq" => Ok(TriggerExpr::seq(children)),
            "par" => Ok(TriggerExpr::par(children)),
            other => Err(self.err(&format!("unknown combinator `{other}`"))),
        }
    }
}
