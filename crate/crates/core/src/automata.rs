//! Compensating automata: state machines that listen to system events and
//! compose compensations on a stack.
//!
//! A transition may install a frame of compensation instructions (bound to a
//! snapshot of the triggering event), clear the whole stack, or do neither.
//! Scoping boxes purge every frame collected during the box's execution when
//! the exit state is reached. Activation pops frames in reverse installation
//! order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SpecError;
use crate::event::{Event, Scalar};
use crate::guard::Guard;

/// One compensation instruction template on a transition. `capture` names the
/// payload/subject keys snapshotted at install time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub comp_action: String,
    pub capture: Vec<String>,
}

/// Transition-level action, beyond installing a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionAction {
    None,
    ClearStack,
}

#[derive(Debug, Clone)]
pub struct CompTransition {
    pub source: String,
    pub target: String,
    /// Event name this transition listens for.
    pub on: String,
    pub guard: Guard,
    pub frame: Vec<InstructionTemplate>,
    pub action: TransitionAction,
}

/// A scoping box: compensations collected between entering `entry` and
/// reaching `exit` are purged at the exit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeBox {
    pub id: String,
    pub entry: String,
    pub exit: String,
}

#[derive(Debug, Clone)]
pub struct CompAutomatonSpec {
    pub name: String,
    pub states: BTreeSet<String>,
    pub initial: String,
    pub finals: BTreeSet<String>,
    pub transitions: Vec<CompTransition>,
    pub boxes: Vec<ScopeBox>,
}

// ---------------------------------------------------------------------------
// Declarative file format

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    name: String,
    states: Vec<String>,
    initial: String,
    #[serde(default)]
    finals: Vec<String>,
    #[serde(default)]
    transitions: Vec<RawTransition>,
    #[serde(default)]
    boxes: Vec<RawBox>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTransition {
    from: String,
    to: String,
    on: String,
    #[serde(default)]
    guard: Option<String>,
    #[serde(default)]
    frame: Vec<RawTemplate>,
    #[serde(default)]
    action: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTemplate {
    comp_action: String,
    #[serde(default)]
    capture: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    id: String,
    entry: String,
    exit: String,
}

impl CompAutomatonSpec {
    pub fn from_json(json: &str) -> Result<Self, SpecError> {
        let raw: RawSpec = serde_json::from_str(json)
            .map_err(|e| SpecError::malformed("<automaton>", e.to_string()))?;
        Self::compile(raw)
    }

    fn compile(raw: RawSpec) -> Result<Self, SpecError> {
        let name = raw.name.clone();
        let err = |detail: String| SpecError::malformed(&name, detail);

        let states: BTreeSet<String> = raw.states.iter().cloned().collect();
        if !states.contains(&raw.initial) {
            return Err(err(format!("initial state `{}` not declared", raw.initial)));
        }
        for f in &raw.finals {
            if !states.contains(f) {
                return Err(err(format!("final state `{f}` not declared")));
            }
        }

        let mut transitions = Vec::new();
        for t in &raw.transitions {
            for s in [&t.from, &t.to] {
                if !states.contains(s) {
                    return Err(err(format!("transition references unknown state `{s}`")));
                }
            }
            if t.on.is_empty() {
                return Err(err(format!("transition from `{}` has empty event name", t.from)));
            }
            let action = match t.action.as_deref() {
                None => TransitionAction::None,
                Some("clear") => TransitionAction::ClearStack,
                Some(other) => {
                    return Err(err(format!("unknown transition action `{other}`")));
                }
            };
            let mut frame = Vec::new();
            for tmpl in &t.frame {
                if tmpl.comp_action.is_empty() {
                    return Err(err("empty comp_action in frame".to_string()));
                }
                frame.push(InstructionTemplate {
                    comp_action: tmpl.comp_action.clone(),
                    capture: tmpl.capture.clone(),
                });
            }
            let guard = match &t.guard {
                Some(g) => Guard::parse(g)?,
                None => Guard::always(),
            };
            transitions.push(CompTransition {
                source: t.from.clone(),
                target: t.to.clone(),
                on: t.on.clone(),
                guard,
                frame,
                action,
            });
        }

        // Two guard-free transitions on the same (state, event) can never be
        // mutually exclusive.
        for (i, a) in transitions.iter().enumerate() {
            for b in &transitions[i + 1..] {
                if a.source == b.source
                    && a.on == b.on
                    && a.guard.source().is_empty()
                    && b.guard.source().is_empty()
                {
                    return Err(err(format!(
                        "transitions from `{}` on `{}` are not mutually exclusive",
                        a.source, a.on
                    )));
                }
            }
        }

        let mut boxes = Vec::new();
        let mut box_ids = BTreeSet::new();
        for b in &raw.boxes {
            if !box_ids.insert(b.id.clone()) {
                return Err(err(format!("duplicate box id `{}`", b.id)));
            }
            if b.entry == b.exit {
                return Err(err(format!("box `{}` has entry == exit", b.id)));
            }
            for s in [&b.entry, &b.exit] {
                if !states.contains(s) {
                    return Err(err(format!("box `{}` references unknown state `{s}`", b.id)));
                }
            }
            boxes.push(ScopeBox { id: b.id.clone(), entry: b.entry.clone(), exit: b.exit.clone() });
        }

        Ok(CompAutomatonSpec {
            name: raw.name,
            states,
            initial: raw.initial,
            finals: raw.finals.into_iter().collect(),
            transitions,
            boxes,
        })
    }
}

// ---------------------------------------------------------------------------
// Runtime

/// A compensation instruction with its install-time argument snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompensationInstruction {
    pub comp_action: String,
    pub bound_args: BTreeMap<String, Scalar>,
    pub origin_seq: u64,
    pub strategy: String,
}

impl CompensationInstruction {
    pub fn args_line(&self) -> String {
        self.bound_args
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// The atomic group of instructions installed by one transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub instructions: Vec<CompensationInstruction>,
    pub origin_seq: u64,
}

/// Snapshots the template's capture keys out of `e`.
pub fn bind(
    template: &InstructionTemplate,
    e: &Event,
    strategy: &str,
) -> Result<CompensationInstruction, SpecError> {
    let mut bound_args = BTreeMap::new();
    for key in &template.capture {
        let value = e.lookup(key).ok_or_else(|| SpecError::MissingCaptureKey {
            key: key.clone(),
            event: e.name.clone(),
            seq: e.seq,
        })?;
        bound_args.insert(key.clone(), value);
    }
    Ok(CompensationInstruction {
        comp_action: template.comp_action.clone(),
        bound_args,
        origin_seq: e.seq,
        strategy: strategy.to_string(),
    })
}

/// What one step did to the instance. Applied in order: purge (box exit),
/// clear, push.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepEffect {
    pub moved: bool,
    pub purged: usize,
    pub cleared: bool,
    pub pushed: usize,
}

impl StepEffect {
    pub fn no_change(&self) -> bool {
        self.purged == 0 && !self.cleared && self.pushed == 0
    }
}

impl fmt::Display for StepEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.purged > 0 {
            write!(f, "Purged({})", self.purged)
        } else if self.cleared {
            write!(f, "Cleared")
        } else if self.pushed > 0 {
            write!(f, "Pushed({})", self.pushed)
        } else {
            write!(f, "NoChange")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BoxMark {
    box_id: String,
    depth: usize,
}

/// A running compensating automaton with its stack.
#[derive(Debug, Clone)]
pub struct CompInstance {
    spec: CompAutomatonSpec,
    current: String,
    stack: Vec<Frame>,
    box_marks: Vec<BoxMark>,
    active: bool,
}

impl CompInstance {
    pub fn new(spec: CompAutomatonSpec) -> Self {
        let current = spec.initial.clone();
        let mut inst = CompInstance {
            spec,
            current,
            stack: Vec::new(),
            box_marks: Vec::new(),
            active: true,
        };
        inst.enter_boxes();
        inst
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn current_state(&self) -> &str {
        &self.current
    }

    pub fn stack_depth(&self) -> usize {
        self.stack.len()
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// Deactivates the instance and drops its stack. Idempotent.
    pub fn discard(&mut self) {
        self.active = false;
        self.stack.clear();
        self.box_marks.clear();
    }

    /// Stable textual rendering of the runtime state, for determinism checks.
    pub fn state_digest(&self) -> String {
        let mut out = format!("{}@{}:active={}", self.spec.name, self.current, self.active);
        for frame in &self.stack {
            out.push_str(&format!(";F{}[", frame.origin_seq));
            for i in &frame.instructions {
                out.push_str(&format!("{}({})", i.comp_action, i.args_line()));
            }
            out.push(']');
        }
        for m in &self.box_marks {
            out.push_str(&format!(";box={}@{}", m.box_id, m.depth));
        }
        out
    }

    /// Steps on one event. Unmatched events are an implicit self-loop. Two
    /// simultaneously enabled transitions are a determinism violation.
    pub fn step(&mut self, e: &Event) -> Result<StepEffect, SpecError> {
        if !self.active {
            return Ok(StepEffect::default());
        }
        let mut matched: Option<usize> = None;
        for (idx, t) in self.spec.transitions.iter().enumerate() {
            if t.source == self.current && t.on == e.name && t.guard.eval(e) {
                if let Some(first) = matched {
                    return Err(SpecError::malformed(
                        &self.spec.name,
                        format!(
                            "state `{}` has two enabled transitions on `{}` (indices {first} and {idx})",
                            self.current, e.name
                        ),
                    ));
                }
                matched = Some(idx);
            }
        }
        let Some(idx) = matched else {
            return Ok(StepEffect::default());
        };
        let t = self.spec.transitions[idx].clone();

        let mut effect = StepEffect { moved: true, ..StepEffect::default() };
        self.current = t.target.clone();

        // Box exits purge before the exiting transition's own frame lands, so
        // a compensation installed on the way out survives the purge.
        effect.purged = self.purge_boxes_at(&t.target);

        if t.action == TransitionAction::ClearStack {
            effect.cleared = true;
            self.stack.clear();
            self.box_marks.clear();
        }

        if !t.frame.is_empty() {
            let mut instructions = Vec::with_capacity(t.frame.len());
            for tmpl in &t.frame {
                instructions.push(bind(tmpl, e, &self.spec.name)?);
            }
            effect.pushed = instructions.len();
            self.stack.push(Frame { instructions, origin_seq: e.seq });
        }

        self.enter_boxes();
        Ok(effect)
    }

    /// Pops every frame top->bottom and returns the instructions in execution
    /// order; within a frame, listed order. The automaton keeps its current
    /// state and continues monitoring.
    pub fn activate(&mut self) -> Vec<CompensationInstruction> {
        if !self.active {
            return Vec::new();
        }
        let mut out = Vec::new();
        while let Some(frame) = self.stack.pop() {
            out.extend(frame.instructions);
        }
        self.box_marks.clear();
        out
    }

    fn enter_boxes(&mut self) {
        for b in &self.spec.boxes {
            if b.entry == self.current && !self.box_marks.iter().any(|m| m.box_id == b.id) {
                self.box_marks.push(BoxMark { box_id: b.id.clone(), depth: self.stack.len() });
            }
        }
    }

    /// Purges innermost-first every active box whose exit is `state`.
    fn purge_boxes_at(&mut self, state: &str) -> usize {
        let mut purged = 0;
        loop {
            let Some(top) = self.box_marks.last() else { break };
            let exits_here = self
                .spec
                .boxes
                .iter()
                .any(|b| b.id == top.box_id && b.exit == state);
            if !exits_here {
                break;
            }
            let depth = top.depth;
            purged += self.stack.len().saturating_sub(depth);
            self.stack.truncate(depth);
            self.box_marks.pop();
        }
        purged
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Phase;
    use proptest::prelude::*;

    fn ev(seq: u64, name: &str) -> Event {
        Event::new(seq, name, Phase::Normal)
    }

    fn shop_spec() -> CompAutomatonSpec {
        CompAutomatonSpec::from_json(
            r#"{
              "name": "shop",
              "states": ["s0", "s1", "s2", "s3"],
              "initial": "s0",
              "finals": ["s3"],
              "transitions": [
                {"from": "s0", "to": "s1", "on": "login"},
                {"from": "s1", "to": "s2", "on": "decrementStock",
                 "frame": [{"comp_action": "incrementStock", "capture": ["qty"]}]},
                {"from": "s2", "to": "s3", "on": "payment",
                 "frame": [{"comp_action": "refund", "capture": ["amount"]}]}
              ],
              "boxes": []
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn basic_transition_installs_no_compensation() {
        let mut inst = CompInstance::new(shop_spec());
        let eff = inst.step(&ev(1, "login")).unwrap();
        assert_eq!(inst.current_state(), "s1");
        assert!(eff.moved);
        assert!(eff.no_change());
        assert_eq!(inst.stack_depth(), 0);
    }

    #[test]
    fn sequential_installs_activate_in_reverse() {
        let mut inst = CompInstance::new(shop_spec());
        inst.step(&ev(1, "login")).unwrap();
        inst.step(&ev(2, "decrementStock").with_payload("qty", 3i64)).unwrap();
        inst.step(&ev(3, "payment").with_payload("amount", 5000i64)).unwrap();
        let actions: Vec<_> =
            inst.activate().iter().map(|i| i.comp_action.clone()).collect();
        assert_eq!(actions, vec!["refund", "incrementStock"]);
        assert_eq!(inst.stack_depth(), 0);
        assert_eq!(inst.current_state(), "s3");
    }

    #[test]
    fn unmatched_event_is_a_self_loop() {
        let mut inst = CompInstance::new(shop_spec());
        let eff = inst.step(&ev(1, "noise")).unwrap();
        assert!(!eff.moved);
        assert_eq!(inst.current_state(), "s0");
    }

    #[test]
    fn multi_instruction_frame_keeps_listed_order() {
        // Oracle: a brute-force recorder that replays the frame semantics —
        // frames reversed, instructions within a frame in listed order.
        let spec = CompAutomatonSpec::from_json(
            r#"{
              "name": "two",
              "states": ["a", "b"],
              "initial": "a",
              "transitions": [
                {"from": "a", "to": "b", "on": "go",
                 "frame": [{"comp_action": "x"}, {"comp_action": "y"}]}
              ]
            }"#,
        )
        .unwrap();
        let mut inst = CompInstance::new(spec);
        inst.step(&ev(1, "go")).unwrap();
        let recorder: Vec<Vec<&str>> = vec![vec!["x", "y"]];
        let expected: Vec<&str> =
            recorder.iter().rev().flat_map(|f| f.iter().copied()).collect();
        assert_eq!(expected, vec!["x", "y"]);
        let actions: Vec<_> =
            inst.activate().iter().map(|i| i.comp_action.clone()).collect();
        assert_eq!(actions, expected);
    }

    #[test]
    fn empty_stack_activates_to_nothing() {
        let mut inst = CompInstance::new(shop_spec());
        assert!(inst.activate().is_empty());
    }

    fn boxed_spec() -> CompAutomatonSpec {
        CompAutomatonSpec::from_json(
            r#"{
              "name": "boxed",
              "states": ["out0", "in", "done"],
              "initial": "out0",
              "transitions": [
                {"from": "out0", "to": "out0", "on": "pre",
                 "frame": [{"comp_action": "undoPre"}]},
                {"from": "out0", "to": "in", "on": "enter"},
                {"from": "in", "to": "in", "on": "mid",
                 "frame": [{"comp_action": "undoMid"}]},
                {"from": "in", "to": "done", "on": "finish"},
                {"from": "done", "to": "done", "on": "post",
                 "frame": [{"comp_action": "undoPost"}]}
              ],
              "boxes": [{"id": "bx", "entry": "in", "exit": "done"}]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn box_exit_purges_frames_collected_inside() {
        let mut inst = CompInstance::new(boxed_spec());
        inst.step(&ev(1, "pre")).unwrap();
        inst.step(&ev(2, "enter")).unwrap();
        inst.step(&ev(3, "mid")).unwrap();
        inst.step(&ev(4, "mid")).unwrap();
        assert_eq!(inst.stack_depth(), 3);
        let eff = inst.step(&ev(5, "finish")).unwrap();
        assert_eq!(eff.purged, 2);
        assert_eq!(inst.stack_depth(), 1);
        let actions: Vec<_> =
            inst.activate().iter().map(|i| i.comp_action.clone()).collect();
        assert_eq!(actions, vec!["undoPre"]);
    }

    #[test]
    fn clear_stack_empties_everything() {
        let spec = CompAutomatonSpec::from_json(
            r#"{
              "name": "courier",
              "states": ["watch"],
              "initial": "watch",
              "transitions": [
                {"from": "watch", "to": "watch", "on": "book",
                 "frame": [{"comp_action": "cancel"}]},
                {"from": "watch", "to": "watch", "on": "ship", "action": "clear"}
              ]
            }"#,
        )
        .unwrap();
        let mut inst = CompInstance::new(spec);
        inst.step(&ev(1, "book")).unwrap();
        inst.step(&ev(2, "book")).unwrap();
        let eff = inst.step(&ev(3, "ship")).unwrap();
        assert!(eff.cleared);
        assert!(inst.activate().is_empty());
    }

    #[test]
    fn binding_snapshots_install_time_values() {
        let tmpl = InstructionTemplate {
            comp_action: "refund".into(),
            capture: vec!["amount".into(), "card".into()],
        };
        let e = ev(9, "payment")
            .with_payload("amount", 5000i64)
            .with_subject("card", "c1");
        let instr = bind(&tmpl, &e, "B1").unwrap();
        assert_eq!(instr.bound_args["amount"], Scalar::Int(5000));
        assert_eq!(instr.bound_args["card"], Scalar::Str("c1".into()));
        assert_eq!(instr.origin_seq, 9);
    }

    #[test]
    fn binding_missing_key_fails() {
        let tmpl = InstructionTemplate {
            comp_action: "refund".into(),
            capture: vec!["balance".into()],
        };
        let e = ev(1, "payment");
        match bind(&tmpl, &e, "B1") {
            Err(SpecError::MissingCaptureKey { key, .. }) => assert_eq!(key, "balance"),
            other => panic!("expected MissingCaptureKey, got {other:?}"),
        }
    }

    #[test]
    fn nondeterministic_step_is_reported() {
        // Overlapping guards pass the static check but trip at runtime.
        let spec = CompAutomatonSpec::from_json(
            r#"{
              "name": "bad",
              "states": ["a", "b", "c"],
              "initial": "a",
              "transitions": [
                {"from": "a", "to": "b", "on": "go", "guard": "amount > 0"},
                {"from": "a", "to": "c", "on": "go", "guard": "amount > 1"}
              ]
            }"#,
        )
        .unwrap();
        let mut inst = CompInstance::new(spec);
        let e = ev(1, "go").with_payload("amount", 5i64);
        assert!(matches!(inst.step(&e), Err(SpecError::MalformedSpec { .. })));
    }

    #[test]
    fn statically_nondeterministic_spec_is_rejected() {
        let res = CompAutomatonSpec::from_json(
            r#"{
              "name": "bad",
              "states": ["a", "b"],
              "initial": "a",
              "transitions": [
                {"from": "a", "to": "b", "on": "go"},
                {"from": "a", "to": "a", "on": "go"}
              ]
            }"#,
        );
        assert!(res.is_err());
    }

    #[test]
    fn discarded_instance_ignores_everything() {
        let mut inst = CompInstance::new(shop_spec());
        inst.step(&ev(1, "login")).unwrap();
        inst.discard();
        let eff = inst.step(&ev(2, "decrementStock").with_payload("qty", 1i64)).unwrap();
        assert!(eff.no_change() && !eff.moved);
        assert!(inst.activate().is_empty());
        inst.discard(); // idempotent
        assert!(!inst.is_active());
    }

    proptest! {
        /// LIFO against a shadow list oracle recording push order.
        #[test]
        fn lifo_against_shadow_oracle(amounts in proptest::collection::vec(1i64..1000, 0..50)) {
            let spec = CompAutomatonSpec::from_json(
                r#"{
                  "name": "acc",
                  "states": ["s"],
                  "initial": "s",
                  "transitions": [
                    {"from": "s", "to": "s", "on": "act",
                     "frame": [{"comp_action": "undo", "capture": ["amount"]}]}
                  ]
                }"#,
            )
            .unwrap();
            let mut inst = CompInstance::new(spec);
            let mut shadow = Vec::new();
            for (i, amt) in amounts.iter().enumerate() {
                let e = ev(i as u64 + 1, "act").with_payload("amount", *amt);
                inst.step(&e).unwrap();
                shadow.push(*amt);
            }
            shadow.reverse();
            let got: Vec<i64> = inst
                .activate()
                .iter()
                .map(|i| match &i.bound_args["amount"] {
                    Scalar::Int(n) => *n,
                    _ => unreachable!(),
                })
                .collect();
            prop_assert_eq!(got, shadow);
        }

        /// Identical (spec, event sequence) pairs yield identical digests.
        #[test]
        fn determinism_digest(names in proptest::collection::vec(0usize..5, 0..30)) {
            let evs: Vec<Event> = names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    let name = ["pre", "enter", "mid", "finish", "post"][*n];
                    ev(i as u64 + 1, name)
                })
                .collect();
            let mut a = CompInstance::new(boxed_spec());
            let mut b = CompInstance::new(boxed_spec());
            for e in &evs {
                a.step(e).unwrap();
                b.step(e).unwrap();
            }
            prop_assert_eq!(a.state_digest(), b.state_digest());
        }
    }
}
