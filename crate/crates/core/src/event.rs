//! Events, signals, and traces: the ordered-channel vocabulary shared by the
//! automata, monitors, manager, and harness.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trigger::TriggerExpr;

/// Payload values are deliberately restricted to integers, booleans, and short
/// strings. Monetary amounts are integer cents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Int(i64),
    Bool(bool),
    Str(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(n) => write!(f, "{n}"),
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Str(s) => write!(f, "{s}"),
        }
    }
}

impl From<i64> for Scalar {
    fn from(n: i64) -> Self {
        Scalar::Int(n)
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_string())
    }
}

/// Whether an event was produced by the forward flow or while compensation
/// instructions were being executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Normal,
    DuringCompensation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Normal => write!(f, "normal"),
            Phase::DuringCompensation => write!(f, "during"),
        }
    }
}

/// A named, payload-carrying occurrence with a globally increasing sequence
/// number. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub name: String,
    /// role -> id (user, card, txn, strategy, ...)
    pub subject: BTreeMap<String, String>,
    pub payload: BTreeMap<String, Scalar>,
    pub phase: Phase,
}

impl Event {
    pub fn new(seq: u64, name: impl Into<String>, phase: Phase) -> Self {
        Event {
            seq,
            name: name.into(),
            subject: BTreeMap::new(),
            payload: BTreeMap::new(),
            phase,
        }
    }

    pub fn with_subject(mut self, role: &str, id: impl Into<String>) -> Self {
        self.subject.insert(role.to_string(), id.into());
        self
    }

    pub fn with_payload(mut self, key: &str, value: impl Into<Scalar>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    /// Looks a key up across payload, subject, and the builtin `phase` and
    /// `name` pseudo-keys. Guards resolve names through this.
    pub fn lookup(&self, key: &str) -> Option<Scalar> {
        if let Some(v) = self.payload.get(key) {
            return Some(v.clone());
        }
        if let Some(v) = self.subject.get(key) {
            return Some(Scalar::Str(v.clone()));
        }
        match key {
            "phase" => Some(Scalar::Str(self.phase.to_string())),
            "name" => Some(Scalar::Str(self.name.clone())),
            _ => None,
        }
    }

    /// Line record `seq|name|subject-pairs|payload-pairs|phase`.
    pub fn to_line(&self) -> String {
        let pairs = |m: &mut dyn Iterator<Item = (String, String)>| {
            m.map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
        };
        let subject = pairs(&mut self.subject.iter().map(|(k, v)| (k.clone(), v.clone())));
        let payload = pairs(&mut self.payload.iter().map(|(k, v)| (k.clone(), v.to_string())));
        format!("{}|{}|{}|{}|{}", self.seq, self.name, subject, payload, self.phase)
    }
}

/// Which side of the handshake a signal belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalSource {
    MonitorSide,
    ManagerSide,
}

impl fmt::Display for SignalSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalSource::MonitorSide => write!(f, "monitor"),
            SignalSource::ManagerSide => write!(f, "manager"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalKind {
    Continue,
    Compensate(TriggerExpr),
}

/// A handshake signal answering a particular event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signal {
    pub kind: SignalKind,
    pub source: SignalSource,
    pub for_seq: u64,
}

impl Signal {
    pub fn cont(source: SignalSource, for_seq: u64) -> Self {
        Signal { kind: SignalKind::Continue, source, for_seq }
    }

    pub fn compensate(expr: TriggerExpr, for_seq: u64) -> Self {
        Signal { kind: SignalKind::Compensate(expr), source: SignalSource::MonitorSide, for_seq }
    }
}

/// An ordered event history with strictly increasing seq values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    events: Vec<Event>,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn last_seq(&self) -> u64 {
        self.events.last().map(|e| e.seq).unwrap_or(0)
    }

    /// Appends `e` if it passes [`validate_event`]; returns whether it was kept.
    pub fn push(&mut self, e: Event) -> bool {
        if validate_event(&e, self) {
            self.events.push(e);
            true
        } else {
            false
        }
    }
}

/// True iff `e` has a non-empty name and a seq strictly greater than the last
/// seq of `t`.
pub fn validate_event(e: &Event, t: &Trace) -> bool {
    !e.name.is_empty() && e.seq > t.last_seq()
}
