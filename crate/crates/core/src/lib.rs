//! Monitor-oriented compensation programming (MOCP).
//!
//! Compensating automata answer *what* to compensate for and *how*; trigger
//! monitors answer *when* and *which* strategy; a compensation manager
//! mediates between the two and a (simulated) transactional system over an
//! event-handshake protocol: the system emits an event and resumes only after
//! two continue tokens, with any pending compensation drained in between.
//!
//! The crate ships the runtime plus a deterministic e-procurement harness and
//! the case-study fixture specs under `fixtures/`.

pub mod automata;
pub mod engine;
pub mod error;
pub mod event;
pub mod guard;
pub mod manager;
pub mod monitor;
pub mod scenario;
pub mod trigger;
pub mod world;

pub use automata::{CompAutomatonSpec, CompInstance, CompensationInstruction};
pub use engine::{run_matrix, run_scenario, validate, Engine, Report};
pub use error::{RunError, SpecError};
pub use event::{Event, Phase, Scalar, Signal, Trace};
pub use manager::{EmissionPlan, ManagerState};
pub use monitor::{MonitorLayer, MonitorSpec};
pub use scenario::ScenarioScript;
pub use trigger::TriggerExpr;
pub use world::WorldState;
