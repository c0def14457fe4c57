//! Outage-management agent: signals are compressed into critical events,
//! matched against a three-tier memory and turned into next-best-action
//! recommendations, with a replay harness that scores them offline.

pub mod clock;
pub mod config;
pub mod domain;
pub mod llm_gateway;
pub mod memory;
pub mod perception;
pub mod reasoning;
pub mod replay_eval;
pub mod service;
pub mod text;

pub use clock::{Clock, SystemClock, VirtualClock};
pub use config::{EvalConfig, MatchMode, SystemConfig};
pub use domain::{Outcome, Phase, Severity};
pub use llm_gateway::Gateway;
pub use memory::{KcaEntry, Memory, PlaybookDoc};
pub use perception::{RawSignal, Topology};
pub use reasoning::{FeedbackInput, FeedbackRecord, Recommendation};
pub use service::{Engine, StreamKind, StreamRecord};
