//! Error types shared across the runtime.

use thiserror::Error;

/// Problems with automata, monitor, or scenario specifications — detected at
/// load time or, for determinism violations, while stepping.
#[derive(Debug, Error)]
pub enum SpecError {
    #[error("malformed spec `{spec}`: {detail}")]
    MalformedSpec { spec: String, detail: String },

    #[error("capture key `{key}` missing from event `{event}` (seq {seq})")]
    MissingCaptureKey { key: String, event: String, seq: u64 },

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("channel routing did not reach a fixpoint within {bound} iterations")]
    ChannelLoopDetected { bound: usize },

    #[error("invalid guard `{input}`: {detail}")]
    InvalidGuard { input: String, detail: String },

    #[error("invalid trigger expression `{input}`: {detail}")]
    InvalidTriggerExpr { input: String, detail: String },

    #[error("invalid action `{input}` in monitor `{monitor}`: {detail}")]
    InvalidMonitorAction { input: String, monitor: String, detail: String },
}

impl SpecError {
    pub fn malformed(spec: &str, detail: impl Into<String>) -> Self {
        SpecError::MalformedSpec { spec: spec.to_string(), detail: detail.into() }
    }
}

/// Faults raised while running a scenario.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Spec(#[from] SpecError),

    #[error("deadlock: continue signals not produced for event seq {0} within the scheduler bound")]
    Deadlock(u64),

    #[error("unknown forward action `{0}`")]
    UnknownAction(String),

    #[error("scenario references unknown {kind} `{id}`")]
    UnknownEntity { kind: String, id: String },
}
