//! Scenario scripts: the declarative encoding of a forward run, including
//! fault injection, user cancellation, and classification hints.

use serde::Deserialize;
use std::collections::BTreeMap;

use crate::error::SpecError;
use crate::event::Scalar;

fn default_funds() -> i64 {
    10_000
}

fn default_count() -> u32 {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    #[serde(default)]
    pub seed: u64,
    /// Bank account balance given to each user on first reference, in cents.
    #[serde(default = "default_funds")]
    pub initial_funds: i64,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", deny_unknown_fields)]
pub enum Step {
    /// A forward action against the world.
    Do {
        action: String,
        #[serde(default)]
        args: BTreeMap<String, Scalar>,
    },
    /// Fault injection: `paymentFail` (with a count), `courierAFail`,
    /// `courierBFail`.
    Fault {
        kind: String,
        #[serde(default = "default_count")]
        count: u32,
    },
    UserCancel { user: String },
    /// Emits `trustedFlag` or `fraudFlag` for the classification monitor.
    Classify { hint: String, user: String },
}

impl ScenarioScript {
    pub fn from_json(json: &str) -> Result<Self, SpecError> {
        serde_json::from_str(json)
            .map_err(|e| SpecError::malformed("<scenario>", e.to_string()))
    }
}

/// The case-study grid: three user classes times three error kinds.
pub const MATRIX_CLASSES: [&str; 3] = ["grey", "white", "black"];
pub const MATRIX_ERRORS: [&str; 3] = ["userCancel", "bankError", "courierError"];

/// Builds the canonical scenario for one matrix cell. The bank-error cell
/// books the courier before paying (seed parity) so the courier compensation
/// is installed by the time payment gives up.
pub fn matrix_scenario(class: &str, error: &str, retry_limit: u32) -> ScenarioScript {
    let mut steps = vec![
        do_step("createCard", &[("user", "u1"), ("card", "c1")]),
        do_step_with_amount("load", &[("user", "u1"), ("card", "c1")], 5000),
    ];
    match class {
        "white" => steps.push(Step::Classify { hint: "trustedFlag".into(), user: "u1".into() }),
        "black" => steps.push(Step::Classify { hint: "fraudFlag".into(), user: "u1".into() }),
        _ => {}
    }
    let mut seed = 0;
    match error {
        "bankError" => {
            seed = 1; // book first, then pay
            steps.push(Step::Fault { kind: "paymentFail".into(), count: retry_limit });
        }
        "courierError" => {
            steps.push(Step::Fault { kind: "courierAFail".into(), count: 1 });
            steps.push(Step::Fault { kind: "courierBFail".into(), count: 1 });
        }
        _ => {}
    }
    steps.push(do_step_with_amount(
        "order",
        &[("user", "u1"), ("card", "c1"), ("txn", "t1")],
        3000,
    ));
    if error == "userCancel" {
        steps.push(Step::UserCancel { user: "u1".into() });
    }
    ScenarioScript { seed, initial_funds: 10_000, steps }
}

fn do_step(action: &str, args: &[(&str, &str)]) -> Step {
    Step::Do {
        action: action.to_string(),
        args: args
            .iter()
            .map(|(k, v)| (k.to_string(), Scalar::Str(v.to_string())))
            .collect(),
    }
}

fn do_step_with_amount(action: &str, args: &[(&str, &str)], amount: i64) -> Step {
    let Step::Do { action, mut args } = do_step(action, args) else { unreachable!() };
    args.insert("amount".to_string(), Scalar::Int(amount));
    Step::Do { action, args }
}
