use crate::domain::{Outcome, Phase, Severity};
use crate::llm_gateway::schema::SupportsOut;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionMeta {
    pub stage: Phase,
    pub affected_service: String,
    pub severity: Severity,
    pub outage_title: String,
}

/// Generalized statement of the current situation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Precondition {
    pub incident_id: String,
    pub ts: DateTime<Utc>,
    pub text: String,
    pub meta: PreconditionMeta,
    pub supporting_events: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecStatus {
    Proposed,
    Executed,
    Dismissed,
    Expired,
}

impl RecStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RecStatus::Proposed => "proposed",
            RecStatus::Executed => "executed",
            RecStatus::Dismissed => "dismissed",
            RecStatus::Expired => "expired",
        }
    }
}

pub type Supports = SupportsOut;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rec_id: String,
    pub incident_id: String,
    pub ts: DateTime<Utc>,
    pub action_text: String,
    pub rationale: String,
    pub supports: Supports,
    pub confidence: f64,
    pub stage: Phase,
    pub refinement_rounds_used: u32,
    pub status: RecStatus,
}

/// No recommendation could be justified within the round budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abstain {
    pub incident_id: String,
    pub ts: DateTime<Utc>,
    pub reason: String,
    pub refinement_rounds_used: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Recommend(Recommendation),
    Abstain(Abstain),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    ExecutedMatching,
    ExecutedOther,
    Dismissed,
}

/// A human action or dismissal, the implicit reward signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec_id: Option<String>,
    pub incident_id: String,
    pub ts: DateTime<Utc>,
    pub human_action_text: String,
    pub disposition: Disposition,
    #[serde(default)]
    pub result: Outcome,
    #[serde(default)]
    pub match_score: f64,
}
