//! Structured completion outputs, one per [`super::SchemaHint`].

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionOut {
    pub precondition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportsOut {
    #[serde(default)]
    pub kca_ids: Vec<String>,
    #[serde(default)]
    pub case_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum RecommendationOut {
    Recommend {
        action: String,
        confidence: f64,
        rationale: String,
        #[serde(default)]
        supports: SupportsOut,
    },
    Insufficient {
        missing: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcaCandidate {
    pub stage: String,
    pub service_domain: String,
    #[serde(default)]
    pub scope: String,
    pub condition: String,
    pub action_template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcaListOut {
    pub entries: Vec<KcaCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedAction {
    pub ts: String,
    pub action_text: String,
    pub source_quote: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionListOut {
    pub actions: Vec<ExtractedAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryOut {
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTypeOut {
    pub event_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchVerdictOut {
    #[serde(rename = "match")]
    pub is_match: bool,
    pub score: f64,
}
