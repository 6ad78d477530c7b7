//! Trigger monitors: guarded event/condition/action automata with counters,
//! inter-monitor channel events, and emission of compensate triggers and
//! strategy discards. A deliberately small subset of the DATE formalism —
//! timers are replaced by event-count retry thresholds.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use crate::error::SpecError;
use crate::event::{Event, Scalar};
use crate::guard::{parse_literal, Env, Guard};
use crate::trigger::TriggerExpr;

/// What a monitor transition listens for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MonitorOn {
    SystemEvent(String),
    ChannelEvent(String),
}

/// One entry of a transition's `do` list, applied in listed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DoAction {
    IncVar(String),
    SetVar(String, Scalar),
    EmitChannel(String),
    EmitCompensate(TriggerExpr),
    DiscardStrategies(BTreeSet<String>),
}

#[derive(Debug, Clone)]
pub struct MonitorTransition {
    pub source: String,
    pub target: String,
    pub on: MonitorOn,
    pub guard: Guard,
    pub actions: Vec<DoAction>,
}

#[derive(Debug, Clone)]
pub struct MonitorSpec {
    pub name: String,
    pub states: BTreeSet<String>,
    pub initial: String,
    pub vars: BTreeMap<String, Scalar>,
    pub transitions: Vec<MonitorTransition>,
}

impl MonitorSpec {
    pub fn listens_on(&self, channel: &str) -> bool {
        self.transitions
            .iter()
            .any(|t| matches!(&t.on, MonitorOn::ChannelEvent(c) if c == channel))
    }

    /// Channels this monitor may emit.
    pub fn emitted_channels(&self) -> BTreeSet<String> {
        self.transitions
            .iter()
            .flat_map(|t| t.actions.iter())
            .filter_map(|a| match a {
                DoAction::EmitChannel(c) => Some(c.clone()),
                _ => None,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Declarative file format

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonitor {
    name: String,
    states: Vec<String>,
    initial: String,
    #[serde(default)]
    vars: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    transitions: Vec<RawMonitorTransition>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonitorTransition {
    from: String,
    to: String,
    /// `event:<name>` or `channel:<name>`.
    on: String,
    #[serde(default)]
    guard: Option<String>,
    #[serde(default, rename = "do")]
    actions: Vec<String>,
}

impl MonitorSpec {
    pub fn from_json(json: &str) -> Result<Self, SpecError> {
        let raw: RawMonitor = serde_json::from_str(json)
            .map_err(|e| SpecError::malformed("<monitor>", e.to_string()))?;
        Self::compile(raw)
    }

    fn compile(raw: RawMonitor) -> Result<Self, SpecError> {
        let name = raw.name.clone();
        let err = |detail: String| SpecError::malformed(&name, detail);

        let states: BTreeSet<String> = raw.states.iter().cloned().collect();
        if !states.contains(&raw.initial) {
            return Err(err(format!("initial state `{}` not declared", raw.initial)));
        }

        let mut vars = BTreeMap::new();
        for (k, v) in &raw.vars {
            let scalar = match v {
                serde_json::Value::Number(n) => {
                    Scalar::Int(n.as_i64().ok_or_else(|| {
                        err(format!("var `{k}` must be an integer"))
                    })?)
                }
                serde_json::Value::String(s) => Scalar::Str(s.clone()),
                serde_json::Value::Bool(b) => Scalar::Bool(*b),
                _ => return Err(err(format!("var `{k}` has unsupported init value"))),
            };
            vars.insert(k.clone(), scalar);
        }
        // Each user starts off as greylisted.
        if let Some(v) = vars.get("user_class") {
            if *v != Scalar::Str("grey".into()) {
                return Err(err("user_class must be initialized to 'grey'".into()));
            }
        }

        let mut transitions = Vec::new();
        for t in &raw.transitions {
            for s in [&t.from, &t.to] {
                if !states.contains(s) {
                    return Err(err(format!("transition references unknown state `{s}`")));
                }
            }
            let on = match t.on.split_once(':') {
                Some(("event", n)) if !n.is_empty() => MonitorOn::SystemEvent(n.to_string()),
                Some(("channel", n)) if !n.is_empty() => MonitorOn::ChannelEvent(n.to_string()),
                _ => return Err(err(format!("bad `on` field `{}`", t.on))),
            };
            let guard = match &t.guard {
                Some(g) => Guard::parse(g)?,
                None => Guard::always(),
            };
            let mut actions = Vec::new();
            let mut compensates = 0;
            for a in &t.actions {
                let action = parse_do_action(a, &name)?;
                if matches!(action, DoAction::EmitCompensate(_)) {
                    compensates += 1;
                }
                if let Some(var) = touched_var(&action) {
                    if !vars.contains_key(var) {
                        return Err(err(format!("action `{a}` references undeclared var `{var}`")));
                    }
                }
                actions.push(action);
            }
            if compensates > 1 {
                return Err(err(format!(
                    "transition from `{}` emits more than one compensate",
                    t.from
                )));
            }
            transitions.push(MonitorTransition {
                source: t.from.clone(),
                target: t.to.clone(),
                on,
                guard,
                actions,
            });
        }

        Ok(MonitorSpec { name: raw.name, states, initial: raw.initial, vars, transitions })
    }
}

fn touched_var(action: &DoAction) -> Option<&str> {
    match action {
        DoAction::IncVar(v) | DoAction::SetVar(v, _) => Some(v),
        _ => None,
    }
}

fn parse_do_action(text: &str, monitor: &str) -> Result<DoAction, SpecError> {
    let err = |detail: &str| SpecError::InvalidMonitorAction {
        input: text.to_string(),
        monitor: monitor.to_string(),
        detail: detail.to_string(),
    };
    let text = text.trim();
    let (head, rest) = text.split_once(' ').unwrap_or((text, ""));
    let rest = rest.trim();
    match head {
        "inc" => {
            if rest.is_empty() {
                return Err(err("inc needs a var name"));
            }
            Ok(DoAction::IncVar(rest.to_string()))
        }
        "set" => {
            let (var, value) = rest
                .split_once(' ')
                .ok_or_else(|| err("set needs `<var> <literal>`"))?;
            Ok(DoAction::SetVar(var.trim().to_string(), parse_literal(value)?))
        }
        "emit" => {
            if rest.is_empty() {
                return Err(err("emit needs a channel name"));
            }
            Ok(DoAction::EmitChannel(rest.to_string()))
        }
        "compensate" => Ok(DoAction::EmitCompensate(TriggerExpr::parse(rest)?)),
        "discard" => {
            let names: BTreeSet<String> = rest
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if names.is_empty() {
                return Err(err("discard needs at least one strategy name"));
            }
            Ok(DoAction::DiscardStrategies(names))
        }
        _ => Err(err("unknown action head")),
    }
}

// ---------------------------------------------------------------------------
// Runtime

/// An inter-monitor communication event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelEvent {
    pub name: String,
}

/// Input to one monitor step.
#[derive(Debug, Clone)]
pub enum MonitorInput<'a> {
    System(&'a Event),
    Channel(&'a ChannelEvent),
}

/// Output of one monitor step, in `do`-list production order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MonitorOutput {
    Channel(ChannelEvent),
    Compensate(TriggerExpr),
    Discard(BTreeSet<String>),
}

#[derive(Debug, Clone)]
pub struct MonitorInstance {
    spec: MonitorSpec,
    current: String,
    var_values: BTreeMap<String, Scalar>,
    retry_limit: i64,
}

struct MonitorEnv<'a> {
    vars: &'a BTreeMap<String, Scalar>,
    retry_limit: i64,
    event: Option<&'a Event>,
}

impl Env for MonitorEnv<'_> {
    fn lookup(&self, name: &str) -> Option<Scalar> {
        if let Some(v) = self.vars.get(name) {
            return Some(v.clone());
        }
        if name == "retry_limit" {
            return Some(Scalar::Int(self.retry_limit));
        }
        self.event.and_then(|e| e.lookup(name))
    }
}

impl MonitorInstance {
    pub fn new(spec: MonitorSpec, retry_limit: i64) -> Self {
        let current = spec.initial.clone();
        let var_values = spec.vars.clone();
        MonitorInstance { spec, current, var_values, retry_limit }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn current_state(&self) -> &str {
        &self.current
    }

    pub fn var(&self, name: &str) -> Option<&Scalar> {
        self.var_values.get(name)
    }

    pub fn spec(&self) -> &MonitorSpec {
        &self.spec
    }

    /// First enabled matching transition in document order fires; no match is
    /// a self-loop with no outputs.
    pub fn step(&mut self, input: MonitorInput<'_>) -> Vec<MonitorOutput> {
        let event = match input {
            MonitorInput::System(e) => Some(e),
            MonitorInput::Channel(_) => None,
        };
        let fired = self.spec.transitions.iter().position(|t| {
            if t.source != self.current {
                return false;
            }
            let on_match = match (&t.on, &input) {
                (MonitorOn::SystemEvent(n), MonitorInput::System(e)) => *n == e.name,
                (MonitorOn::ChannelEvent(n), MonitorInput::Channel(c)) => *n == c.name,
                _ => false,
            };
            if !on_match {
                return false;
            }
            let env = MonitorEnv {
                vars: &self.var_values,
                retry_limit: self.retry_limit,
                event,
            };
            t.guard.eval(&env)
        });
        let Some(idx) = fired else {
            return Vec::new();
        };
        let t = self.spec.transitions[idx].clone();
        self.current = t.target.clone();
        let mut outputs = Vec::new();
        for action in &t.actions {
            match action {
                DoAction::IncVar(v) => {
                    if let Some(Scalar::Int(n)) = self.var_values.get(v) {
                        let next = n + 1;
                        self.var_values.insert(v.clone(), Scalar::Int(next));
                    }
                }
                DoAction::SetVar(v, value) => {
                    self.var_values.insert(v.clone(), value.clone());
                }
                DoAction::EmitChannel(c) => {
                    outputs.push(MonitorOutput::Channel(ChannelEvent { name: c.clone() }));
                }
                DoAction::EmitCompensate(expr) => {
                    outputs.push(MonitorOutput::Compensate(expr.clone()));
                }
                DoAction::DiscardStrategies(names) => {
                    outputs.push(MonitorOutput::Discard(names.clone()));
                }
            }
        }
        outputs
    }
}

/// Aggregated result of pushing one event (plus channel fixpoint) through the
/// monitor layer.
#[derive(Debug, Default)]
pub struct LayerOutput {
    pub triggers: Vec<TriggerExpr>,
    pub discards: Vec<BTreeSet<String>>,
    /// Channel events delivered, in delivery order (for the CHAN log).
    pub channels: Vec<String>,
    pub lints: Vec<String>,
}

/// The fixed-registration-order collection of monitors, with channel routing.
#[derive(Debug)]
pub struct MonitorLayer {
    monitors: Vec<MonitorInstance>,
}

impl MonitorLayer {
    pub fn new(specs: Vec<MonitorSpec>, retry_limit: i64) -> Self {
        let monitors = specs
            .into_iter()
            .map(|s| MonitorInstance::new(s, retry_limit))
            .collect();
        MonitorLayer { monitors }
    }

    pub fn monitors(&self) -> &[MonitorInstance] {
        &self.monitors
    }

    /// Channels emitted somewhere but listened to nowhere. Reported as lints
    /// by `validate`, never a runtime fault.
    pub fn unknown_channels(&self) -> Vec<String> {
        let mut emitted = BTreeSet::new();
        for m in &self.monitors {
            emitted.extend(m.spec().emitted_channels());
        }
        emitted
            .into_iter()
            .filter(|c| !self.monitors.iter().any(|m| m.spec().listens_on(c)))
            .collect()
    }

    /// Steps every monitor on the event, then routes channel emissions to a
    /// fixpoint.
    pub fn process_event(&mut self, e: &Event) -> Result<LayerOutput, SpecError> {
        let mut out = LayerOutput::default();
        let mut pending: Vec<ChannelEvent> = Vec::new();
        for m in &mut self.monitors {
            for o in m.step(MonitorInput::System(e)) {
                collect(o, &mut out, &mut pending);
            }
        }
        self.route_channels(pending, &mut out)?;
        Ok(out)
    }

    /// Delivers channel events to all listening monitors in emission order,
    /// iterating until no new channel events are produced.
    pub fn route_channels(
        &mut self,
        pending: Vec<ChannelEvent>,
        out: &mut LayerOutput,
    ) -> Result<(), SpecError> {
        let total_states: usize = self.monitors.iter().map(|m| m.spec().states.len()).sum();
        let bound = (self.monitors.len() * total_states).max(16);
        let mut queue: std::collections::VecDeque<ChannelEvent> = pending.into();
        let mut delivered = 0usize;
        while let Some(ch) = queue.pop_front() {
            delivered += 1;
            if delivered > bound {
                return Err(SpecError::ChannelLoopDetected { bound });
            }
            out.channels.push(ch.name.clone());
            let mut any_listener = false;
            for m in &mut self.monitors {
                if !m.spec().listens_on(&ch.name) {
                    continue;
                }
                any_listener = true;
                for o in m.step(MonitorInput::Channel(&ch)) {
                    match o {
                        MonitorOutput::Channel(c) => queue.push_back(c),
                        MonitorOutput::Compensate(t) => out.triggers.push(t),
                        MonitorOutput::Discard(d) => out.discards.push(d),
                    }
                }
            }
            if !any_listener {
                out.lints.push(format!("channel `{}` has no listener", ch.name));
            }
        }
        Ok(())
    }
}

fn collect(o: MonitorOutput, out: &mut LayerOutput, pending: &mut Vec<ChannelEvent>) {
    match o {
        MonitorOutput::Channel(c) => pending.push(c),
        MonitorOutput::Compensate(t) => out.triggers.push(t),
        MonitorOutput::Discard(d) => out.discards.push(d),
    }
}
