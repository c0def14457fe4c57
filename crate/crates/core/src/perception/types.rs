use crate::domain::{Phase, Severity};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Metadata,
    Communication,
    Telemetry,
}

impl Modality {
    pub fn parse(raw: &str) -> Option<Modality> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "metadata" => Some(Modality::Metadata),
            "communication" => Some(Modality::Communication),
            "telemetry" => Some(Modality::Telemetry),
            _ => None,
        }
    }
}

/// One timestamped input record as it arrives from a connector or trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSignal {
    pub incident_id: String,
    pub ts: DateTime<Utc>,
    pub modality: Modality,
    pub source: String,
    pub payload: String,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
}

impl RawSignal {
    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs
            .get(key)
            .map(String::as_str)
            .filter(|v| !v.trim().is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Service,
    Region,
    Component,
    Team,
}

impl EntityKind {
    pub fn parse(raw: &str) -> Option<EntityKind> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "service" => Some(EntityKind::Service),
            "region" => Some(EntityKind::Region),
            "component" => Some(EntityKind::Component),
            "team" => Some(EntityKind::Team),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Service => "service",
            EntityKind::Region => "region",
            EntityKind::Component => "component",
            EntityKind::Team => "team",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub canonical_name: String,
    #[serde(default)]
    pub aliases_matched: Vec<String>,
    /// Mentioned but absent from the topology; the name is the surface form.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unresolved: bool,
}

impl EntityRef {
    pub fn same_entity(&self, other: &EntityRef) -> bool {
        self.kind == other.kind && self.canonical_name == other.canonical_name
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.kind.as_str(), self.canonical_name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tags {
    pub phase: Phase,
    pub event_type: String,
    pub severity: Severity,
    pub relevance: f64,
}

/// A normalized, enriched and classified signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(flatten)]
    pub signal: RawSignal,
    pub dedup_key: String,
    pub entities: Vec<EntityRef>,
    pub tags: Tags,
    pub dependency_context: Vec<String>,
}

/// Windowed aggregate of an incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub incident_id: String,
    pub window_index: u64,
    pub window_start: DateTime<Utc>,
    pub window_end: DateTime<Utc>,
    pub phase: Phase,
    pub severity: Severity,
    pub open_hypotheses: Vec<String>,
    pub mitigations_in_flight: Vec<String>,
    /// Completion notes for mitigations, kept so a removal from
    /// `mitigations_in_flight` can be told apart from a silent drop.
    pub resolution_notes: Vec<String>,
    pub affected_entities: Vec<EntityRef>,
    pub summary: String,
    pub observation_refs: Vec<String>,
}

impl ContextState {
    /// The state every incident starts from, diffed against window 0.
    pub fn baseline(incident_id: &str, window_start: DateTime<Utc>) -> Self {
        Self {
            incident_id: incident_id.to_string(),
            window_index: 0,
            window_start,
            window_end: window_start,
            phase: Phase::Detect,
            severity: Severity::Unknown,
            open_hypotheses: Vec::new(),
            mitigations_in_flight: Vec::new(),
            resolution_notes: Vec::new(),
            affected_entities: Vec::new(),
            summary: String::new(),
            observation_refs: Vec::new(),
        }
    }

    /// First entity of `kind`, preferring resolved names.
    pub fn first_entity(&self, kind: EntityKind) -> Option<&EntityRef> {
        let mut of_kind = self.affected_entities.iter().filter(|e| e.kind == kind);
        self.affected_entities
            .iter()
            .find(|e| e.kind == kind && !e.unresolved)
            .or_else(|| of_kind.next())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ScopeExpansion,
    MitigationStart,
    MitigationComplete,
    DependencyRecovery,
    RootCauseIdentified,
    SeverityChange,
    PhaseTransition,
    Other,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ScopeExpansion => "scope_expansion",
            EventKind::MitigationStart => "mitigation_start",
            EventKind::MitigationComplete => "mitigation_complete",
            EventKind::DependencyRecovery => "dependency_recovery",
            EventKind::RootCauseIdentified => "root_cause_identified",
            EventKind::SeverityChange => "severity_change",
            EventKind::PhaseTransition => "phase_transition",
            EventKind::Other => "other",
        }
    }
}

/// A promoted, significant state transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalEvent {
    pub event_id: String,
    pub incident_id: String,
    pub ts: DateTime<Utc>,
    pub window_index: u64,
    pub kind: EventKind,
    pub summary: String,
    pub delta: String,
    pub evidence: Vec<String>,
    pub phase: Phase,
    pub significance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldChange {
    pub field: String,
    pub old_value: String,
    pub new_value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDelta {
    /// `None` when the delta is taken against the incident baseline.
    pub from_window: Option<u64>,
    pub to_window: u64,
    pub changed_fields: Vec<FieldChange>,
    pub significance: f64,
}
