//! The deterministic scenario engine: executes scripted steps against the
//! world, emits events, runs the event-handshake protocol between the system,
//! the monitor layer, and the compensation manager, and executes compensation
//! instructions back against the world.
//!
//! Everything runs cooperatively on one thread; for every Normal-phase event
//! the system resumes only after two continue tokens (the monitor path and
//! the manager path). Compensation-time events are non-blocking notifies.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;

use crate::automata::{CompAutomatonSpec, CompensationInstruction};
use crate::error::{RunError, SpecError};
use crate::event::{Event, Phase, Scalar, Signal, SignalKind, SignalSource, Trace};
use crate::manager::{CompensationSink, ManagerState, SinkOutcome};
use crate::monitor::{MonitorLayer, MonitorSpec};
use crate::scenario::{matrix_scenario, ScenarioScript, Step, MATRIX_CLASSES, MATRIX_ERRORS};
use crate::trigger::TriggerExpr;
use crate::world::{
    exec_compensation, EventDraft, ForwardFail, UserClass, WorldState, REGISTERED_COMP_ACTIONS,
};

/// Everything a finished run leaves behind. Rendering is stable-ordered for
/// golden-file comparison.
#[derive(Debug, Clone)]
pub struct Report {
    pub trace: Trace,
    pub world_final: WorldState,
    pub emission_log: Vec<(u64, CompensationInstruction)>,
    pub handshake_log: Vec<Signal>,
    pub trigger_log: Vec<(u64, TriggerExpr)>,
    pub channel_log: Vec<(u64, String)>,
    pub discard_log: Vec<(u64, BTreeSet<String>)>,
    pub fault_log: Vec<String>,
    pub lints: Vec<String>,
    pub continue_ledger: BTreeMap<u64, u32>,
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::from("TRACE\n");
        for e in self.trace.events() {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        for (seq, t) in &self.trigger_log {
            out.push_str(&format!("TRIG|{seq}|{t}\n"));
        }
        for (seq, c) in &self.channel_log {
            out.push_str(&format!("CHAN|{seq}|{c}\n"));
        }
        for (seq, names) in &self.discard_log {
            let joined = names.iter().cloned().collect::<Vec<_>>().join(",");
            out.push_str(&format!("DISCARD|{seq}|{joined}\n"));
        }
        for (batch, i) in &self.emission_log {
            out.push_str(&format!(
                "COMP|{batch}|{}|{}|{}\n",
                i.strategy,
                i.comp_action,
                i.args_line()
            ));
        }
        for s in &self.handshake_log {
            if matches!(s.kind, SignalKind::Continue) {
                out.push_str(&format!("HSK|{}|{}\n", s.for_seq, s.source));
            }
        }
        for f in &self.fault_log {
            out.push_str(&format!("FAULT|{f}\n"));
        }
        for l in &self.lints {
            out.push_str(&format!("LINT|{l}\n"));
        }
        out.push_str("WORLD\n");
        for line in self.world_final.summary_lines() {
            out.push_str(&line);
            out.push('\n');
        }
        out.push_str("END\n");
        out
    }
}

#[derive(Debug, Default)]
struct RunLogs {
    handshake: Vec<Signal>,
    triggers: Vec<(u64, TriggerExpr)>,
    channels: Vec<(u64, String)>,
    discards: Vec<(u64, BTreeSet<String>)>,
    lints: Vec<String>,
}

pub struct Engine {
    world: WorldState,
    trace: Trace,
    manager: ManagerState,
    monitors: MonitorLayer,
    logs: RunLogs,
    next_seq: u64,
    retry_limit: u32,
    seed: u64,
    initial_funds: i64,
}

impl Engine {
    pub fn new(
        ca_specs: Vec<CompAutomatonSpec>,
        mon_specs: Vec<MonitorSpec>,
        retry_limit: u32,
    ) -> Result<Self, SpecError> {
        // Every comp_action a strategy can install must be registered.
        for spec in &ca_specs {
            for t in &spec.transitions {
                for tmpl in &t.frame {
                    if !REGISTERED_COMP_ACTIONS.contains(&tmpl.comp_action.as_str()) {
                        return Err(SpecError::malformed(
                            &spec.name,
                            format!("comp_action `{}` is not registered", tmpl.comp_action),
                        ));
                    }
                }
            }
        }
        let monitors = MonitorLayer::new(mon_specs, retry_limit as i64);
        let mut logs = RunLogs::default();
        logs.lints.extend(
            monitors
                .unknown_channels()
                .into_iter()
                .map(|c| format!("channel `{c}` has no listener")),
        );
        Ok(Engine {
            world: WorldState::new(),
            trace: Trace::new(),
            manager: ManagerState::new(ca_specs),
            monitors,
            logs,
            next_seq: 0,
            retry_limit,
            seed: 0,
            initial_funds: 10_000,
        })
    }

    pub fn manager(&self) -> &ManagerState {
        &self.manager
    }

    pub fn manager_mut(&mut self) -> &mut ManagerState {
        &mut self.manager
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn run(&mut self, script: &ScenarioScript) -> Result<(), RunError> {
        self.seed = script.seed;
        self.initial_funds = script.initial_funds;
        for step in &script.steps {
            self.run_step(step)?;
        }
        Ok(())
    }

    pub fn report(&self) -> Report {
        Report {
            trace: self.trace.clone(),
            world_final: self.world.clone(),
            emission_log: self.manager.emission_log().to_vec(),
            handshake_log: self.logs.handshake.clone(),
            trigger_log: self.logs.triggers.clone(),
            channel_log: self.logs.channels.clone(),
            discard_log: self.logs.discards.clone(),
            fault_log: self.manager.faults().to_vec(),
            lints: self.logs.lints.clone(),
            continue_ledger: self.manager.continue_ledger().clone(),
        }
    }

    fn run_step(&mut self, step: &Step) -> Result<(), RunError> {
        match step {
            Step::Do { action, args } => self.run_do(action, args),
            Step::Fault { kind, count } => match kind.as_str() {
                "paymentFail" => {
                    self.world.pending_payment_fails = *count;
                    Ok(())
                }
                "courierAFail" => {
                    self.world.courier_a_available = false;
                    Ok(())
                }
                "courierBFail" => {
                    self.world.courier_b_available = false;
                    Ok(())
                }
                other => Err(RunError::UnknownAction(format!("fault:{other}"))),
            },
            Step::UserCancel { user } => {
                self.emit_normal(EventDraft::new("userCancel").subject("user", user))
            }
            Step::Classify { hint, user } => {
                match hint.as_str() {
                    "trustedFlag" => self.world.set_class(user, UserClass::White),
                    "fraudFlag" => self.world.set_class(user, UserClass::Black),
                    other => return Err(RunError::UnknownAction(format!("classify:{other}"))),
                }
                self.emit_normal(EventDraft::new(hint).subject("user", user))
            }
        }
    }

    fn run_do(&mut self, action: &str, args: &BTreeMap<String, Scalar>) -> Result<(), RunError> {
        let s = |key: &str| -> Result<String, RunError> {
            match args.get(key) {
                Some(Scalar::Str(v)) => Ok(v.clone()),
                _ => Err(RunError::UnknownEntity {
                    kind: format!("arg `{key}` of `{action}`"),
                    id: "<missing>".into(),
                }),
            }
        };
        let n = |key: &str| -> Result<i64, RunError> {
            match args.get(key) {
                Some(Scalar::Int(v)) => Ok(*v),
                _ => Err(RunError::UnknownEntity {
                    kind: format!("arg `{key}` of `{action}`"),
                    id: "<missing>".into(),
                }),
            }
        };
        match action {
            "createCard" => {
                let draft = self.world.create_card(&s("user")?, &s("card")?, self.initial_funds);
                self.emit_normal(draft)
            }
            "load" => {
                let (user, card, amount) = (s("user")?, s("card")?, n("amount")?);
                match self.world.load(&user, &card, amount) {
                    Ok(d) => self.emit_normal(d),
                    Err(ForwardFail::InsufficientFunds) => self.emit_normal(
                        EventDraft::new("loadFail")
                            .subject("user", &user)
                            .subject("card", &card)
                            .amount("amount", amount),
                    ),
                    Err(f) => unreachable!("load cannot fail with {f:?}"),
                }
            }
            "transfer" => {
                let (user, from, to, amount) = (s("user")?, s("from")?, s("to")?, n("amount")?);
                match self.world.transfer(&user, &from, &to, amount) {
                    Ok(d) => self.emit_normal(d),
                    Err(_) => self.emit_normal(
                        EventDraft::new("transferFail")
                            .subject("user", &user)
                            .amount("amount", amount),
                    ),
                }
            }
            "order" => self.run_order(&s("user")?, &s("card")?, &s("txn")?, n("amount")?),
            "ship" => {
                let draft = self.world.ship(&s("txn")?);
                self.emit_normal(draft)
            }
            "emit" => {
                let name = s("name")?;
                let mut draft = EventDraft::new(&name);
                for (k, v) in args {
                    if k != "name" {
                        draft.payload.insert(k.clone(), v.clone());
                    }
                }
                self.emit_normal(draft)
            }
            other => Err(RunError::UnknownAction(other.to_string())),
        }
    }

    /// An order pays the third party and books a courier. The two sub-actions
    /// are conceptually concurrent; the seed's parity fixes the interleaving
    /// deterministically. A sub-action that exhausts its retries abandons the
    /// remainder of the order.
    fn run_order(
        &mut self,
        user: &str,
        card: &str,
        txn: &str,
        amount: i64,
    ) -> Result<(), RunError> {
        self.emit_normal(
            EventDraft::new("order")
                .subject("user", user)
                .subject("card", card)
                .subject("txn", txn)
                .amount("amount", amount),
        )?;
        let pay_first = self.seed % 2 == 0;
        let subs: [&str; 2] = if pay_first { ["pay", "book"] } else { ["book", "pay"] };
        for sub in subs {
            let abandoned = match sub {
                "pay" => self.run_pay(user, card, txn, amount)?,
                _ => self.run_book(user, txn)?,
            };
            if abandoned {
                debug!("order {txn}: `{sub}` abandoned, skipping the rest");
                break;
            }
        }
        Ok(())
    }

    fn run_pay(
        &mut self,
        user: &str,
        card: &str,
        txn: &str,
        amount: i64,
    ) -> Result<bool, RunError> {
        let fail_draft = || {
            EventDraft::new("paymentFail")
                .subject("user", user)
                .subject("card", card)
                .subject("txn", txn)
                .amount("amount", amount)
        };
        let fails = std::mem::take(&mut self.world.pending_payment_fails);
        for _ in 0..fails {
            self.emit_normal(fail_draft())?;
        }
        if fails >= self.retry_limit {
            return Ok(true);
        }
        match self.world.pay(user, card, txn, amount) {
            Ok(d) => {
                self.emit_normal(d)?;
                Ok(false)
            }
            Err(_) => {
                self.emit_normal(fail_draft())?;
                Ok(true)
            }
        }
    }

    fn run_book(&mut self, user: &str, txn: &str) -> Result<bool, RunError> {
        match self.world.book_courier(user, txn) {
            Ok(d) => {
                self.emit_normal(d)?;
                Ok(false)
            }
            Err(_) => {
                // No courier available: every retry fails, then give up.
                for _ in 0..self.retry_limit {
                    self.emit_normal(
                        EventDraft::new("courierFail").subject("user", user).subject("txn", txn),
                    )?;
                }
                Ok(true)
            }
        }
    }

    /// Emits one Normal-phase event and runs the full handshake: monitors
    /// first, then the manager steps every strategy, then discards and
    /// triggers take effect, the emission loop drains if anything is pending,
    /// and finally the two continue tokens are recorded.
    fn emit_normal(&mut self, draft: EventDraft) -> Result<(), RunError> {
        self.next_seq += 1;
        let seq = self.next_seq;
        let mut e = Event::new(seq, draft.name, Phase::Normal);
        e.subject = draft.subject;
        e.payload = draft.payload;
        debug!("system event {}", e.to_line());
        assert!(self.trace.push(e.clone()), "engine produced an invalid event");

        let out = self.monitors.process_event(&e)?;
        self.manager.on_event(&e)?;
        for c in out.channels {
            self.logs.channels.push((seq, c));
        }
        self.logs.lints.extend(out.lints);
        for d in out.discards {
            self.manager.discard(&d)?;
            self.logs.discards.push((seq, d));
        }
        for t in out.triggers {
            self.logs.triggers.push((seq, t.clone()));
            self.manager.enqueue(t);
        }

        if self.manager.has_pending() {
            let mut sink = EngineSink {
                world: &mut self.world,
                monitors: &mut self.monitors,
                trace: &mut self.trace,
                logs: &mut self.logs,
                next_seq: &mut self.next_seq,
            };
            self.manager.emission_loop(&mut sink, seq)?;
        }

        // Two continue tokens per Normal event; when the monitor path chose
        // to compensate, the manager issues the monitor-side token on its
        // behalf once the loop has drained.
        for source in [SignalSource::MonitorSide, SignalSource::ManagerSide] {
            self.logs.handshake.push(Signal::cont(source, seq));
            self.manager.record_continue(seq);
        }
        Ok(())
    }
}

/// The system side of the compensate line: executes instructions against the
/// world and feeds the resulting compensation-time events back through the
/// monitor layer.
struct EngineSink<'a> {
    world: &'a mut WorldState,
    monitors: &'a mut MonitorLayer,
    trace: &'a mut Trace,
    logs: &'a mut RunLogs,
    next_seq: &'a mut u64,
}

impl CompensationSink for EngineSink<'_> {
    fn execute(&mut self, batch: u64, instr: &CompensationInstruction) -> SinkOutcome {
        let mut outcome = SinkOutcome::default();
        let draft = match exec_compensation(self.world, instr) {
            Ok(d) => d,
            Err(fault) => {
                outcome.fault = Some(fault);
                return outcome;
            }
        };
        *self.next_seq += 1;
        let seq = *self.next_seq;
        let mut e = Event::new(seq, draft.name, Phase::DuringCompensation);
        e.subject = draft.subject;
        e.payload = draft.payload;
        debug!("compensation event (batch {batch}) {}", e.to_line());
        assert!(self.trace.push(e.clone()), "sink produced an invalid event");

        match self.monitors.process_event(&e) {
            Ok(out) => {
                for c in out.channels {
                    self.logs.channels.push((seq, c));
                }
                self.logs.lints.extend(out.lints);
                for d in &out.discards {
                    self.logs.discards.push((seq, d.clone()));
                }
                for t in &out.triggers {
                    self.logs.triggers.push((seq, t.clone()));
                }
                outcome.new_triggers = out.triggers;
                outcome.discards = out.discards;
            }
            Err(err) => {
                outcome.error = Some(err);
                return outcome;
            }
        }
        outcome.event = Some(e);
        outcome
    }
}

/// Parses and cross-checks specs without running anything; returns the lint
/// list (unlistened channels).
pub fn validate(
    ca_specs: Vec<CompAutomatonSpec>,
    mon_specs: Vec<MonitorSpec>,
) -> Result<Vec<String>, SpecError> {
    let engine = Engine::new(ca_specs, mon_specs, 3)?;
    Ok(engine.logs.lints.clone())
}

/// Runs one scenario end to end.
pub fn run_scenario(
    script: &ScenarioScript,
    ca_specs: Vec<CompAutomatonSpec>,
    mon_specs: Vec<MonitorSpec>,
    retry_limit: u32,
) -> Result<Report, RunError> {
    let mut engine = Engine::new(ca_specs, mon_specs, retry_limit)?;
    engine.run(script)?;
    Ok(engine.report())
}

/// Runs the nine canonical (user class x error kind) scenarios and reports
/// the trigger expression the monitors resolved for each cell.
pub fn run_matrix(
    ca_specs: &[CompAutomatonSpec],
    mon_specs: &[MonitorSpec],
    retry_limit: u32,
) -> Result<Vec<(String, String, Option<TriggerExpr>)>, RunError> {
    let mut rows = Vec::new();
    for class in MATRIX_CLASSES {
        for error in MATRIX_ERRORS {
            let script = matrix_scenario(class, error, retry_limit);
            let report =
                run_scenario(&script, ca_specs.to_vec(), mon_specs.to_vec(), retry_limit)?;
            let expr = report.trigger_log.first().map(|(_, t)| t.clone());
            rows.push((class.to_string(), error.to_string(), expr));
        }
    }
    Ok(rows)
}
