//! The compensation manager: broadcasts events to all strategies, queues
//! compensate triggers from the monitor layer, resolves seq/par trigger
//! expressions into an emission plan, and drives the drain-and-recheck
//! emission loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::automata::{CompAutomatonSpec, CompInstance, CompensationInstruction};
use crate::error::{RunError, SpecError};
use crate::event::Event;
use crate::trigger::TriggerExpr;

/// Whether the instructions of a batch may be executed concurrently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Sequential,
    ParallelOk,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub mode: BatchMode,
    pub instructions: Vec<CompensationInstruction>,
}

/// Resolved emission order for one trigger: batches strictly in sequence,
/// instructions within a ParallelOk batch grouped by strategy in name order.
#[derive(Debug, Clone, Default)]
pub struct EmissionPlan {
    pub batches: Vec<Batch>,
}

impl EmissionPlan {
    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn instructions(&self) -> impl Iterator<Item = &CompensationInstruction> {
        self.batches.iter().flat_map(|b| b.instructions.iter())
    }
}

/// Result of executing one compensation instruction in the system, together
/// with whatever the monitor layer produced while observing its event.
#[derive(Debug, Default)]
pub struct SinkOutcome {
    pub fault: Option<String>,
    pub event: Option<Event>,
    pub new_triggers: Vec<TriggerExpr>,
    pub discards: Vec<BTreeSet<String>>,
    /// Hard error observed while the sink processed the instruction (e.g. a
    /// channel loop among monitors); aborts the run.
    pub error: Option<SpecError>,
}

/// The system-side consumer of compensation instructions.
pub trait CompensationSink {
    fn execute(&mut self, batch: u64, instr: &CompensationInstruction) -> SinkOutcome;
}

#[derive(Debug)]
pub struct ManagerState {
    strategies: BTreeMap<String, CompInstance>,
    pending_triggers: VecDeque<TriggerExpr>,
    emission_log: Vec<(u64, CompensationInstruction)>,
    continue_ledger: BTreeMap<u64, u32>,
    faults: Vec<String>,
    next_batch: u64,
    /// Safety bound on instruction emissions per loop entry.
    loop_bound: usize,
}

impl ManagerState {
    pub fn new(specs: Vec<CompAutomatonSpec>) -> Self {
        let strategies = specs
            .into_iter()
            .map(|s| (s.name.clone(), CompInstance::new(s)))
            .collect();
        ManagerState {
            strategies,
            pending_triggers: VecDeque::new(),
            emission_log: Vec::new(),
            continue_ledger: BTreeMap::new(),
            faults: Vec::new(),
            next_batch: 0,
            loop_bound: 10_000,
        }
    }

    pub fn strategy(&self, name: &str) -> Option<&CompInstance> {
        self.strategies.get(name)
    }

    pub fn strategy_names(&self) -> impl Iterator<Item = &str> {
        self.strategies.keys().map(String::as_str)
    }

    pub fn emission_log(&self) -> &[(u64, CompensationInstruction)] {
        &self.emission_log
    }

    pub fn continue_ledger(&self) -> &BTreeMap<u64, u32> {
        &self.continue_ledger
    }

    pub fn faults(&self) -> &[String] {
        &self.faults
    }

    pub fn has_pending(&self) -> bool {
        !self.pending_triggers.is_empty()
    }

    pub fn enqueue(&mut self, trigger: TriggerExpr) {
        self.pending_triggers.push_back(trigger);
    }

    pub fn record_continue(&mut self, for_seq: u64) {
        *self.continue_ledger.entry(for_seq).or_insert(0) += 1;
    }

    /// Steps every active strategy with the event.
    pub fn on_event(&mut self, e: &Event) -> Result<(), SpecError> {
        for inst in self.strategies.values_mut() {
            inst.step(e)?;
        }
        Ok(())
    }

    /// Deactivates the named strategies and empties their stacks. Idempotent.
    pub fn discard(&mut self, names: &BTreeSet<String>) -> Result<(), SpecError> {
        for n in names {
            let inst = self
                .strategies
                .get_mut(n)
                .ok_or_else(|| SpecError::UnknownStrategy(n.clone()))?;
            inst.discard();
        }
        Ok(())
    }

    /// Activates every strategy named in `expr` and lays their instructions
    /// out as batches: Seq children in listed order as separate batches, Par
    /// children merged into one ParallelOk batch with strategy groups in name
    /// order. Discarded strategies and empty stacks contribute nothing.
    pub fn resolve(&mut self, expr: &TriggerExpr) -> Result<EmissionPlan, SpecError> {
        let batches = self.resolve_expr(expr)?;
        Ok(EmissionPlan { batches })
    }

    fn resolve_expr(&mut self, expr: &TriggerExpr) -> Result<Vec<Batch>, SpecError> {
        match expr {
            TriggerExpr::Strategy(name) => {
                let inst = self
                    .strategies
                    .get_mut(name)
                    .ok_or_else(|| SpecError::UnknownStrategy(name.clone()))?;
                let instructions = inst.activate();
                if instructions.is_empty() {
                    Ok(Vec::new())
                } else {
                    Ok(vec![Batch { mode: BatchMode::Sequential, instructions }])
                }
            }
            TriggerExpr::Seq(children) => {
                let mut batches = Vec::new();
                for c in children {
                    batches.extend(self.resolve_expr(c)?);
                }
                Ok(batches)
            }
            TriggerExpr::Par(children) => {
                let mut groups: Vec<(String, Vec<CompensationInstruction>)> = Vec::new();
                for c in children {
                    let child_batches = self.resolve_expr(c)?;
                    let instrs: Vec<_> = child_batches
                        .into_iter()
                        .flat_map(|b| b.instructions)
                        .collect();
                    if !instrs.is_empty() {
                        groups.push((c.to_string(), instrs));
                    }
                }
                groups.sort_by(|a, b| a.0.cmp(&b.0));
                let instructions: Vec<_> =
                    groups.into_iter().flat_map(|(_, i)| i).collect();
                if instructions.is_empty() {
                    Ok(Vec::new())
                } else {
                    Ok(vec![Batch { mode: BatchMode::ParallelOk, instructions }])
                }
            }
        }
    }

    /// Drains the trigger queue: dequeue, resolve, emit batch by batch to the
    /// sink, absorbing triggers raised by compensation-time events, and
    /// re-check until the queue stays empty. Continue signals are the
    /// caller's business, issued after this returns.
    ///
    /// Callers must only enter with at least one pending trigger.
    pub fn emission_loop(
        &mut self,
        sink: &mut dyn CompensationSink,
        for_seq: u64,
    ) -> Result<(), RunError> {
        assert!(self.has_pending(), "emission_loop entered with an empty trigger queue");
        let mut emitted = 0usize;
        while let Some(trigger) = self.pending_triggers.pop_front() {
            let plan = self.resolve(&trigger)?;
            for batch in plan.batches {
                let batch_id = self.next_batch;
                self.next_batch += 1;
                for instr in &batch.instructions {
                    emitted += 1;
                    if emitted > self.loop_bound {
                        return Err(RunError::Deadlock(for_seq));
                    }
                    self.emission_log.push((batch_id, instr.clone()));
                    let outcome = sink.execute(batch_id, instr);
                    if let Some(err) = outcome.error {
                        return Err(err.into());
                    }
                    if let Some(fault) = outcome.fault {
                        self.faults.push(format!(
                            "{}:{} {}",
                            instr.strategy, instr.comp_action, fault
                        ));
                        // Failed compensations are logged and skipped.
                    }
                    if let Some(e) = &outcome.event {
                        self.on_event(e)?;
                    }
                    for d in &outcome.discards {
                        self.discard(d)?;
                    }
                    for t in outcome.new_triggers {
                        self.enqueue(t);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Phase;

    fn ev(seq: u64, name: &str) -> Event {
        Event::new(seq, name, Phase::Normal)
    }

    fn strategy(name: &str, on: &str, comp: &str) -> CompAutomatonSpec {
        CompAutomatonSpec::from_json(&format!(
            r#"{{
              "name": "{name}",
              "states": ["s"],
              "initial": "s",
              "transitions": [
                {{"from": "s", "to": "s", "on": "{on}",
                 "frame": [{{"comp_action": "{comp}"}}]}}
              ]
            }}"#
        ))
        .unwrap()
    }

    fn mgr() -> ManagerState {
        ManagerState::new(vec![
            strategy("B1", "payment", "refundFeeBank"),
            strategy("C2", "book", "cancelFeeUser"),
        ])
    }

    struct NullSink;
    impl CompensationSink for NullSink {
        fn execute(&mut self, _batch: u64, _instr: &CompensationInstruction) -> SinkOutcome {
            SinkOutcome::default()
        }
    }

    #[test]
    fn on_event_steps_only_active_strategies() {
        let mut m = mgr();
        m.on_event(&ev(1, "payment")).unwrap();
        assert_eq!(m.strategy("B1").unwrap().stack_depth(), 1);
        assert_eq!(m.strategy("C2").unwrap().stack_depth(), 0);

        m.discard(&["B1".to_string()].into_iter().collect()).unwrap();
        m.on_event(&ev(2, "payment")).unwrap();
        assert_eq!(m.strategy("B1").unwrap().stack_depth(), 0);
    }

    #[test]
    fn seq_resolution_orders_batches() {
        let mut m = mgr();
        m.on_event(&ev(1, "payment")).unwrap();
        m.on_event(&ev(2, "book")).unwrap();
        let plan = m
            .resolve(&TriggerExpr::parse("seq(C2, B1)").unwrap())
            .unwrap();
        assert_eq!(plan.batches.len(), 2);
        assert_eq!(plan.batches[0].instructions[0].comp_action, "cancelFeeUser");
        assert_eq!(plan.batches[1].instructions[0].comp_action, "refundFeeBank");
        // Stacks are empty immediately after their contribution is planned.
        assert_eq!(m.strategy("B1").unwrap().stack_depth(), 0);
        assert_eq!(m.strategy("C2").unwrap().stack_depth(), 0);
    }

    #[test]
    fn par_resolution_merges_in_name_order() {
        let mut m = mgr();
        m.on_event(&ev(1, "payment")).unwrap();
        m.on_event(&ev(2, "book")).unwrap();
        let plan = m
            .resolve(&TriggerExpr::parse("par(C2, B1)").unwrap())
            .unwrap();
        assert_eq!(plan.batches.len(), 1);
        assert_eq!(plan.batches[0].mode, BatchMode::ParallelOk);
        let strategies: Vec<_> = plan.batches[0]
            .instructions
            .iter()
            .map(|i| i.strategy.clone())
            .collect();
        assert_eq!(strategies, vec!["B1", "C2"]);
    }

    #[test]
    fn empty_stack_yields_empty_plan() {
        let mut m = mgr();
        let plan = m.resolve(&TriggerExpr::strategy("C2")).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn discarded_strategy_contributes_nothing() {
        let mut m = mgr();
        m.on_event(&ev(1, "payment")).unwrap();
        let names: BTreeSet<String> = ["B1".to_string()].into_iter().collect();
        m.discard(&names).unwrap();
        m.discard(&names).unwrap(); // idempotent
        let plan = m.resolve(&TriggerExpr::strategy("B1")).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn discard_empty_set_is_a_noop() {
        let mut m = mgr();
        m.on_event(&ev(1, "payment")).unwrap();
        m.discard(&BTreeSet::new()).unwrap();
        assert_eq!(m.strategy("B1").unwrap().stack_depth(), 1);
    }

    #[test]
    fn unknown_strategy_is_an_error() {
        let mut m = mgr();
        assert!(matches!(
            m.resolve(&TriggerExpr::strategy("Z9")),
            Err(SpecError::UnknownStrategy(_))
        ));
        let names: BTreeSet<String> = ["Z9".to_string()].into_iter().collect();
        assert!(m.discard(&names).is_err());
    }

    #[test]
    fn emission_loop_drains_and_rechecks() {
        // A sink whose first execution raises a second trigger.
        struct RecheckSink {
            raised: bool,
        }
        impl CompensationSink for RecheckSink {
            fn execute(&mut self, _batch: u64, _instr: &CompensationInstruction) -> SinkOutcome {
                let mut out = SinkOutcome::default();
                if !self.raised {
                    self.raised = true;
                    out.new_triggers.push(TriggerExpr::strategy("C2"));
                }
                out
            }
        }
        let mut m = mgr();
        m.on_event(&ev(1, "payment")).unwrap();
        m.on_event(&ev(2, "book")).unwrap();
        m.enqueue(TriggerExpr::strategy("B1"));
        m.emission_loop(&mut RecheckSink { raised: false }, 2).unwrap();
        let actions: Vec<_> = m
            .emission_log()
            .iter()
            .map(|(_, i)| i.comp_action.clone())
            .collect();
        assert_eq!(actions, vec!["refundFeeBank", "cancelFeeUser"]);
        assert!(!m.has_pending());
    }

    #[test]
    fn faulted_instruction_is_logged_and_skipped() {
        struct FaultSink;
        impl CompensationSink for FaultSink {
            fn execute(&mut self, _batch: u64, _instr: &CompensationInstruction) -> SinkOutcome {
                SinkOutcome { fault: Some("boom".into()), ..SinkOutcome::default() }
            }
        }
        let mut m = mgr();
        m.on_event(&ev(1, "payment")).unwrap();
        m.enqueue(TriggerExpr::strategy("B1"));
        m.emission_loop(&mut FaultSink, 1).unwrap();
        assert_eq!(m.faults().len(), 1);
        assert_eq!(m.emission_log().len(), 1);
    }

    #[test]
    #[should_panic(expected = "empty trigger queue")]
    fn emission_loop_requires_a_pending_trigger() {
        let mut m = mgr();
        let _ = m.emission_loop(&mut NullSink, 1);
    }
}
