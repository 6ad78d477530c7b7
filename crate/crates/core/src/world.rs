//! The simulated e-procurement world: virtual credit cards, bank accounts,
//! courier bookings, shipments, a charges ledger, and the forward and
//! compensating actions that operate on it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::automata::CompensationInstruction;
use crate::event::Scalar;

/// Flat cancellation fee, in cents, per cancelled operation.
pub const CANCEL_FEE: i64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Payer {
    User,
    Bank,
    Courier,
    Eproc,
}

impl fmt::Display for Payer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Payer::User => "user",
            Payer::Bank => "bank",
            Payer::Courier => "courier",
            Payer::Eproc => "eproc",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UserClass {
    #[default]
    Grey,
    White,
    Black,
}

impl fmt::Display for UserClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            UserClass::Grey => "grey",
            UserClass::White => "white",
            UserClass::Black => "black",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Charge {
    pub payer: Payer,
    pub amount: i64,
    pub reason: String,
}

/// A forward action that could not commit; converted to a fail event by the
/// harness, never a crash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardFail {
    InsufficientFunds,
    NoCourierAvailable,
}

/// An event the world wants emitted; the engine assigns seq and phase.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventDraft {
    pub name: String,
    pub subject: BTreeMap<String, String>,
    pub payload: BTreeMap<String, Scalar>,
}

impl EventDraft {
    pub fn new(name: &str) -> Self {
        EventDraft { name: name.to_string(), ..EventDraft::default() }
    }

    pub fn subject(mut self, role: &str, id: &str) -> Self {
        self.subject.insert(role.to_string(), id.to_string());
        self
    }

    pub fn amount(mut self, key: &str, cents: i64) -> Self {
        self.payload.insert(key.to_string(), Scalar::Int(cents));
        self
    }

    pub fn text(mut self, key: &str, value: &str) -> Self {
        self.payload.insert(key.to_string(), Scalar::Str(value.to_string()));
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct WorldState {
    pub cards: BTreeMap<String, i64>,
    pub bank_account: BTreeMap<String, i64>,
    pub courier_a_available: bool,
    pub courier_b_available: bool,
    pub bookings: BTreeMap<String, String>,
    pub shipments: BTreeSet<String>,
    pub blocked_cards: BTreeSet<String>,
    pub charges: Vec<Charge>,
    pub third_party_paid: BTreeMap<String, i64>,
    /// Refunds withheld from blacklisted users, pending investigation.
    pub held: BTreeMap<String, i64>,
    pub classes: BTreeMap<String, UserClass>,
    /// Injected fault: the next payment attempt fails this many times.
    pub pending_payment_fails: u32,
}

impl WorldState {
    pub fn new() -> Self {
        WorldState {
            courier_a_available: true,
            courier_b_available: true,
            ..WorldState::default()
        }
    }

    pub fn class_of(&self, user: &str) -> UserClass {
        self.classes.get(user).copied().unwrap_or_default()
    }

    pub fn set_class(&mut self, user: &str, class: UserClass) {
        self.classes.insert(user.to_string(), class);
    }

    // -- forward actions ----------------------------------------------------

    pub fn create_card(&mut self, user: &str, card: &str, initial_funds: i64) -> EventDraft {
        self.bank_account.entry(user.to_string()).or_insert(initial_funds);
        self.cards.entry(card.to_string()).or_insert(0);
        EventDraft::new("createCard").subject("user", user).subject("card", card)
    }

    pub fn load(
        &mut self,
        user: &str,
        card: &str,
        amount: i64,
    ) -> Result<EventDraft, ForwardFail> {
        let account = self.bank_account.entry(user.to_string()).or_insert(0);
        if *account < amount {
            return Err(ForwardFail::InsufficientFunds);
        }
        *account -= amount;
        *self.cards.entry(card.to_string()).or_insert(0) += amount;
        Ok(EventDraft::new("load")
            .subject("user", user)
            .subject("card", card)
            .amount("amount", amount))
    }

    pub fn transfer(
        &mut self,
        user: &str,
        from: &str,
        to: &str,
        amount: i64,
    ) -> Result<EventDraft, ForwardFail> {
        let src = self.cards.entry(from.to_string()).or_insert(0);
        if *src < amount {
            return Err(ForwardFail::InsufficientFunds);
        }
        *src -= amount;
        *self.cards.entry(to.to_string()).or_insert(0) += amount;
        Ok(EventDraft::new("transfer")
            .subject("user", user)
            .text("from", from)
            .text("to", to)
            .amount("amount", amount))
    }

    pub fn pay(
        &mut self,
        user: &str,
        card: &str,
        txn: &str,
        amount: i64,
    ) -> Result<EventDraft, ForwardFail> {
        let balance = self.cards.entry(card.to_string()).or_insert(0);
        if *balance < amount {
            return Err(ForwardFail::InsufficientFunds);
        }
        *balance -= amount;
        *self.third_party_paid.entry(txn.to_string()).or_insert(0) += amount;
        Ok(EventDraft::new("payment")
            .subject("user", user)
            .subject("card", card)
            .subject("txn", txn)
            .amount("amount", amount))
    }

    /// Books courier A or B depending on availability.
    pub fn book_courier(&mut self, user: &str, txn: &str) -> Result<EventDraft, ForwardFail> {
        let courier = if self.courier_a_available {
            "A"
        } else if self.courier_b_available {
            "B"
        } else {
            return Err(ForwardFail::NoCourierAvailable);
        };
        self.bookings.insert(txn.to_string(), courier.to_string());
        Ok(EventDraft::new(&format!("bookCourier{courier}"))
            .subject("user", user)
            .subject("txn", txn)
            .text("courier", courier))
    }

    pub fn ship(&mut self, txn: &str) -> EventDraft {
        self.shipments.insert(txn.to_string());
        EventDraft::new("ship").subject("txn", txn)
    }

    // -- reporting ----------------------------------------------------------

    /// Total money visible on the user side, plus cancellation fees the users
    /// themselves paid. Constant across any scenario.
    pub fn user_side_total(&self) -> i64 {
        let charges_by_user: i64 = self
            .charges
            .iter()
            .filter(|c| c.payer == Payer::User)
            .map(|c| c.amount)
            .sum();
        self.bank_account.values().sum::<i64>()
            + self.cards.values().sum::<i64>()
            + self.third_party_paid.values().sum::<i64>()
            + self.held.values().sum::<i64>()
            + charges_by_user
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (u, b) in &self.bank_account {
            out.push(format!("account|{u}|{b}"));
        }
        for (c, b) in &self.cards {
            out.push(format!("card|{c}|{b}"));
        }
        for c in &self.blocked_cards {
            out.push(format!("blocked|{c}"));
        }
        for (t, c) in &self.bookings {
            out.push(format!("booking|{t}|{c}"));
        }
        for t in &self.shipments {
            out.push(format!("shipped|{t}"));
        }
        for (t, a) in &self.third_party_paid {
            out.push(format!("paid|{t}|{a}"));
        }
        for (u, a) in &self.held {
            out.push(format!("held|{u}|{a}"));
        }
        for (u, c) in &self.classes {
            out.push(format!("class|{u}|{c}"));
        }
        for c in &self.charges {
            out.push(format!("charge|{}|{}|{}", c.payer, c.amount, c.reason));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Compensating actions

fn arg_str<'a>(i: &'a CompensationInstruction, key: &str) -> Result<&'a str, String> {
    match i.bound_args.get(key) {
        Some(Scalar::Str(s)) => Ok(s),
        Some(other) => Err(format!("arg `{key}` is not a string ({other})")),
        None => Err(format!("missing arg `{key}`")),
    }
}

fn arg_int(i: &CompensationInstruction, key: &str) -> Result<i64, String> {
    match i.bound_args.get(key) {
        Some(Scalar::Int(n)) => Ok(*n),
        Some(other) => Err(format!("arg `{key}` is not an integer ({other})")),
        None => Err(format!("missing arg `{key}`")),
    }
}

fn comp_draft(i: &CompensationInstruction) -> EventDraft {
    let mut d = EventDraft::new(&i.comp_action).subject("strategy", &i.strategy);
    d.payload = i.bound_args.clone();
    d
}

/// The set of comp_action names the registry knows; anything a strategy spec
/// references must be listed here.
pub const REGISTERED_COMP_ACTIONS: &[&str] = &[
    "undoLoad",
    "undoTransfer",
    "refundFeeBank",
    "refundFeeUser",
    "refundFeeEproc",
    "blockCard",
    "cancelCourierFeeCourier",
    "cancelCourierFeeUser",
    "cancelCourierFeeEproc",
    "noop",
];

/// Applies one compensation instruction using its install-time argument
/// snapshot. On fault the world is left unchanged and an error string is
/// returned for the fault log.
pub fn exec_compensation(
    world: &mut WorldState,
    instr: &CompensationInstruction,
) -> Result<EventDraft, String> {
    match instr.comp_action.as_str() {
        "undoLoad" => {
            let user = arg_str(instr, "user")?.to_string();
            let card = arg_str(instr, "card")?.to_string();
            let amount = arg_int(instr, "amount")?;
            if self_balance(world, &card)? < amount {
                return Err(format!("card `{card}` balance below undo amount"));
            }
            *world.cards.get_mut(&card).unwrap() -= amount;
            *world.bank_account.entry(user).or_insert(0) += amount;
            Ok(comp_draft(instr))
        }
        "undoTransfer" => {
            let from = arg_str(instr, "from")?.to_string();
            let to = arg_str(instr, "to")?.to_string();
            let amount = arg_int(instr, "amount")?;
            if self_balance(world, &to)? < amount {
                return Err(format!("card `{to}` balance below undo amount"));
            }
            *world.cards.get_mut(&to).unwrap() -= amount;
            *world.cards.entry(from).or_insert(0) += amount;
            Ok(comp_draft(instr))
        }
        "refundFeeBank" => refund(world, instr, Payer::Bank),
        "refundFeeUser" => refund(world, instr, Payer::User),
        "refundFeeEproc" => refund(world, instr, Payer::Eproc),
        "blockCard" => {
            let card = arg_str(instr, "card")?.to_string();
            if !world.cards.contains_key(&card) {
                return Err(format!("cannot block unknown card `{card}`"));
            }
            world.blocked_cards.insert(card);
            Ok(comp_draft(instr))
        }
        "cancelCourierFeeCourier" => cancel_courier(world, instr, Payer::Courier),
        "cancelCourierFeeUser" => cancel_courier(world, instr, Payer::User),
        "cancelCourierFeeEproc" => cancel_courier(world, instr, Payer::Eproc),
        "noop" => Ok(comp_draft(instr)),
        other => Err(format!("unregistered comp_action `{other}`")),
    }
}

fn self_balance(world: &WorldState, card: &str) -> Result<i64, String> {
    world
        .cards
        .get(card)
        .copied()
        .ok_or_else(|| format!("unknown card `{card}`"))
}

/// Refunds a payment. The designated payer carries the cancellation fee; a
/// fee paid by the user makes the refund partial, any other payer leaves it
/// full. Blacklisted users do not get the money back: it is held pending
/// investigation, though the fee is still charged.
fn refund(
    world: &mut WorldState,
    instr: &CompensationInstruction,
    payer: Payer,
) -> Result<EventDraft, String> {
    let user = arg_str(instr, "user")?.to_string();
    let card = arg_str(instr, "card")?.to_string();
    let txn = arg_str(instr, "txn")?.to_string();
    let amount = arg_int(instr, "amount")?;
    let paid = world.third_party_paid.get(&txn).copied().unwrap_or(0);
    if paid < amount {
        return Err(format!("txn `{txn}` has only {paid} recoverable, needs {amount}"));
    }
    if !world.cards.contains_key(&card) {
        return Err(format!("unknown card `{card}`"));
    }
    *world.third_party_paid.get_mut(&txn).unwrap() -= amount;
    // A fee carried by the user comes out of the refunded amount itself.
    let returned = if payer == Payer::User { amount - CANCEL_FEE } else { amount };
    if world.class_of(&user) == UserClass::Black {
        *world.held.entry(user).or_insert(0) += returned;
    } else {
        *world.cards.get_mut(&card).unwrap() += returned;
    }
    world.charges.push(Charge {
        payer,
        amount: CANCEL_FEE,
        reason: "cancel payment".into(),
    });
    Ok(comp_draft(instr))
}

fn cancel_courier(
    world: &mut WorldState,
    instr: &CompensationInstruction,
    payer: Payer,
) -> Result<EventDraft, String> {
    let txn = arg_str(instr, "txn")?.to_string();
    if !world.bookings.contains_key(&txn) {
        return Err(format!("no booking for txn `{txn}`"));
    }
    // A fee carried by the user is debited from their bank account.
    if payer == Payer::User {
        let user = arg_str(instr, "user")?.to_string();
        let account = world
            .bank_account
            .get_mut(&user)
            .ok_or_else(|| format!("unknown user `{user}`"))?;
        if *account < CANCEL_FEE {
            return Err(format!("user `{user}` cannot cover the cancellation fee"));
        }
        *account -= CANCEL_FEE;
    }
    world.bookings.remove(&txn);
    world.charges.push(Charge {
        payer,
        amount: CANCEL_FEE,
        reason: "cancel courier".into(),
    });
    Ok(comp_draft(instr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn instr(action: &str, args: &[(&str, Scalar)]) -> CompensationInstruction {
        CompensationInstruction {
            comp_action: action.to_string(),
            bound_args: args
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect::<BTreeMap<_, _>>(),
            origin_seq: 1,
            strategy: "T".to_string(),
        }
    }

    fn funded_world() -> WorldState {
        let mut w = WorldState::new();
        w.create_card("u1", "c1", 10_000);
        w
    }

    #[test]
    fn load_is_additive_and_conserving() {
        let mut w = funded_world();
        let d = w.load("u1", "c1", 5000).unwrap();
        assert_eq!(w.cards["c1"], 5000);
        assert_eq!(w.bank_account["u1"], 5000);
        assert_eq!(d.name, "load");
        assert_eq!(w.user_side_total(), 10_000);
    }

    #[test]
    fn transfer_conserves() {
        let mut w = funded_world();
        w.create_card("u1", "c2", 10_000);
        w.load("u1", "c1", 5000).unwrap();
        w.transfer("u1", "c1", "c2", 2000).unwrap();
        assert_eq!(w.cards["c1"], 3000);
        assert_eq!(w.cards["c2"], 2000);
    }

    #[test]
    fn insufficient_funds_is_reported_not_committed() {
        let mut w = funded_world();
        assert_eq!(w.load("u1", "c1", 99_999), Err(ForwardFail::InsufficientFunds));
        assert_eq!(w.cards["c1"], 0);
    }

    #[test]
    fn booking_falls_back_to_courier_b() {
        let mut w = funded_world();
        w.courier_a_available = false;
        let d = w.book_courier("u1", "t1").unwrap();
        assert_eq!(d.name, "bookCourierB");
        assert_eq!(w.bookings["t1"], "B");
        w.courier_b_available = false;
        assert_eq!(w.book_courier("u1", "t2"), Err(ForwardFail::NoCourierAvailable));
    }

    #[test]
    fn refund_user_fee_is_partial_with_user_charge() {
        let mut w = funded_world();
        w.load("u1", "c1", 5000).unwrap();
        w.pay("u1", "c1", "t1", 3000).unwrap();
        let i = instr(
            "refundFeeUser",
            &[
                ("user", "u1".into()),
                ("card", "c1".into()),
                ("txn", "t1".into()),
                ("amount", Scalar::Int(3000)),
            ],
        );
        exec_compensation(&mut w, &i).unwrap();
        assert_eq!(w.cards["c1"], 2000 + 3000 - CANCEL_FEE);
        assert_eq!(w.third_party_paid["t1"], 0);
        assert_eq!(w.charges.len(), 1);
        assert_eq!(w.charges[0].payer, Payer::User);
        assert_eq!(w.charges[0].amount, CANCEL_FEE);
        assert_eq!(w.user_side_total(), 10_000);
    }

    #[test]
    fn refund_bank_fee_is_full() {
        let mut w = funded_world();
        w.load("u1", "c1", 5000).unwrap();
        w.pay("u1", "c1", "t1", 3000).unwrap();
        let i = instr(
            "refundFeeBank",
            &[
                ("user", "u1".into()),
                ("card", "c1".into()),
                ("txn", "t1".into()),
                ("amount", Scalar::Int(3000)),
            ],
        );
        exec_compensation(&mut w, &i).unwrap();
        assert_eq!(w.cards["c1"], 5000);
        assert_eq!(w.charges[0].payer, Payer::Bank);
    }

    #[test]
    fn blacklisted_refund_is_withheld_but_fee_still_charged() {
        let mut w = funded_world();
        w.load("u1", "c1", 5000).unwrap();
        w.pay("u1", "c1", "t1", 3000).unwrap();
        w.set_class("u1", UserClass::Black);
        let i = instr(
            "refundFeeUser",
            &[
                ("user", "u1".into()),
                ("card", "c1".into()),
                ("txn", "t1".into()),
                ("amount", Scalar::Int(3000)),
            ],
        );
        exec_compensation(&mut w, &i).unwrap();
        assert_eq!(w.cards["c1"], 2000);
        assert_eq!(w.held["u1"], 3000 - CANCEL_FEE);
        assert_eq!(w.charges[0].payer, Payer::User);
        assert_eq!(w.user_side_total(), 10_000);
    }

    #[test]
    fn block_card_inserts_and_faults_on_unknown() {
        let mut w = funded_world();
        let ok = instr("blockCard", &[("card", "c1".into())]);
        exec_compensation(&mut w, &ok).unwrap();
        assert!(w.blocked_cards.contains("c1"));
        let bad = instr("blockCard", &[("card", "zz".into())]);
        assert!(exec_compensation(&mut w, &bad).is_err());
        assert_eq!(w.blocked_cards.len(), 1);
    }

    #[test]
    fn cancel_courier_removes_booking_and_charges() {
        let mut w = funded_world();
        w.book_courier("u1", "t1").unwrap();
        let i = instr("cancelCourierFeeCourier", &[("txn", "t1".into())]);
        exec_compensation(&mut w, &i).unwrap();
        assert!(w.bookings.is_empty());
        assert_eq!(w.charges[0].payer, Payer::Courier);
        // Second cancellation has nothing to cancel.
        assert!(exec_compensation(&mut w, &i).is_err());
    }

    #[test]
    fn cancel_courier_user_fee_debits_account() {
        let mut w = funded_world();
        w.book_courier("u1", "t1").unwrap();
        let i = instr(
            "cancelCourierFeeUser",
            &[("txn", "t1".into()), ("user", "u1".into())],
        );
        exec_compensation(&mut w, &i).unwrap();
        assert_eq!(w.bank_account["u1"], 10_000 - CANCEL_FEE);
        assert_eq!(w.user_side_total(), 10_000);
    }

    #[test]
    fn undo_load_restores_pre_action_balance() {
        let mut w = funded_world();
        w.load("u1", "c1", 5000).unwrap();
        let i = instr(
            "undoLoad",
            &[
                ("user", "u1".into()),
                ("card", "c1".into()),
                ("amount", Scalar::Int(5000)),
            ],
        );
        exec_compensation(&mut w, &i).unwrap();
        assert_eq!(w.cards["c1"], 0);
        assert_eq!(w.bank_account["u1"], 10_000);
    }
}
