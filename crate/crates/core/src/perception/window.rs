//! Window aggregation, consecutive-state deltas and critical-event promotion.

use super::classify::{
    explicit_phase, EVENT_DEPENDENCY_RECOVERY, EVENT_HYPOTHESIS, EVENT_MITIGATION_COMPLETE,
    EVENT_MITIGATION_START, EVENT_ROOT_CAUSE,
};
use super::types::{
    ContextState, CriticalEvent, EntityRef, EventKind, FieldChange, Observation, StateDelta,
};
use super::PerceptionError;
use crate::llm_gateway::schema::SummaryOut;
use crate::llm_gateway::{prompt, CompletionRequest, Gateway, SchemaHint};
use crate::text::truncate_chars;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub const CONFIRMED_PREFIX: &str = "confirmed: ";
pub const DEPENDENCY_PREFIX: &str = "dependency: ";
const ITEM_CHARS: usize = 200;
const SUMMARY_CHARS: usize = 400;

/// Significance weight per changed field group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaWeights {
    pub phase: f64,
    pub severity: f64,
    pub entity_each: f64,
    pub entity_cap: f64,
    pub mitigations: f64,
    pub hypotheses: f64,
}

impl Default for DeltaWeights {
    fn default() -> Self {
        Self {
            phase: 0.5,
            severity: 0.5,
            entity_each: 0.3,
            entity_cap: 0.6,
            mitigations: 0.4,
            hypotheses: 0.2,
        }
    }
}

fn push_unique(list: &mut Vec<String>, item: String) -> bool {
    if item.is_empty() || list.iter().any(|x| x.eq_ignore_ascii_case(&item)) {
        return false;
    }
    list.push(item);
    true
}

fn item_text(payload: &str) -> String {
    truncate_chars(&prompt::clean(payload), ITEM_CHARS)
}

fn merge_entity(into: &mut Vec<EntityRef>, e: &EntityRef) {
    match into.iter_mut().find(|x| x.same_entity(e)) {
        Some(x) => {
            for a in &e.aliases_matched {
                if !x.aliases_matched.contains(a) {
                    x.aliases_matched.push(a.clone());
                }
            }
        }
        None => into.push(e.clone()),
    }
}

/// Folds one window of observations into the running incident state.
///
/// `prev` must be the state of `window_index - 1`, or `None` for window 0.
/// An empty window carries `prev` forward unchanged apart from its bounds.
pub fn aggregate(
    incident_id: &str,
    window_index: u64,
    window: (DateTime<Utc>, DateTime<Utc>),
    observations: &[Observation],
    prev: Option<&ContextState>,
    gateway: &Gateway,
) -> Result<ContextState, PerceptionError> {
    match prev {
        Some(p) if p.window_index + 1 != window_index => {
            return Err(PerceptionError::WindowOrderViolation {
                expected: p.window_index + 1,
                got: window_index,
            })
        }
        None if window_index != 0 => {
            return Err(PerceptionError::WindowOrderViolation {
                expected: 0,
                got: window_index,
            })
        }
        _ => {}
    }
    let mut state = prev
        .cloned()
        .unwrap_or_else(|| ContextState::baseline(incident_id, window.0));
    state.window_index = window_index;
    state.window_start = window.0;
    state.window_end = window.1;
    state.observation_refs = observations.iter().map(|o| o.dedup_key.clone()).collect();
    if observations.is_empty() {
        return Ok(state);
    }

    for obs in observations {
        match explicit_phase(&obs.signal) {
            Some((p, true)) => state.phase = p,
            _ => state.phase = state.phase.max(obs.tags.phase),
        }
        state.severity = state.severity.most_severe(obs.tags.severity);
        for e in &obs.entities {
            merge_entity(&mut state.affected_entities, e);
        }
        let text = item_text(&obs.signal.payload);
        match obs.tags.event_type.as_str() {
            EVENT_HYPOTHESIS => {
                push_unique(&mut state.open_hypotheses, text);
            }
            EVENT_ROOT_CAUSE => {
                push_unique(
                    &mut state.open_hypotheses,
                    format!("{CONFIRMED_PREFIX}{text}"),
                );
            }
            EVENT_MITIGATION_START => {
                push_unique(&mut state.mitigations_in_flight, text);
            }
            // A completion only counts against something that was in flight;
            // otherwise chatter about "restored" would churn the state.
            EVENT_MITIGATION_COMPLETE if !state.mitigations_in_flight.is_empty() => {
                state.mitigations_in_flight.clear();
                push_unique(&mut state.resolution_notes, text);
            }
            EVENT_DEPENDENCY_RECOVERY => {
                push_unique(
                    &mut state.resolution_notes,
                    format!("{DEPENDENCY_PREFIX}{text}"),
                );
            }
            _ => {}
        }
    }

    let lines: Vec<String> = observations
        .iter()
        .map(|o| format!("- {}", prompt::clean(&o.signal.payload)))
        .collect();
    let req = CompletionRequest::new(SchemaHint::Summary)
        .section(prompt::PREVIOUS_SUMMARY, state.summary.clone())
        .section(prompt::WINDOW_OBSERVATIONS, lines.join("\n"))
        .traced(incident_id, window.1, None);
    let out: SummaryOut = gateway.complete_as(&req)?;
    state.summary = truncate_chars(out.summary.trim(), SUMMARY_CHARS);
    Ok(state)
}

fn joined(list: &[String]) -> String {
    list.join(" ;; ")
}

fn entity_names(list: &[EntityRef]) -> String {
    list.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

fn added_entities<'a>(prev: &ContextState, cur: &'a ContextState) -> Vec<&'a EntityRef> {
    cur.affected_entities
        .iter()
        .filter(|e| !prev.affected_entities.iter().any(|p| p.same_entity(e)))
        .collect()
}

/// Field-level diff between consecutive states with its weighted significance.
///
/// `prev = None` diffs window 0 against the incident baseline.
pub fn compute_delta(
    prev: Option<&ContextState>,
    cur: &ContextState,
    weights: &DeltaWeights,
) -> Result<StateDelta, PerceptionError> {
    let from_window = prev.map(|p| p.window_index);
    let baseline = ContextState::baseline(&cur.incident_id, cur.window_start);
    let prev = match prev {
        Some(p) if cur.window_index != p.window_index + 1 => {
            return Err(PerceptionError::WindowOrderViolation {
                expected: p.window_index + 1,
                got: cur.window_index,
            })
        }
        Some(p) => p,
        None => &baseline,
    };
    let mut changes = Vec::new();
    let mut significance = 0.0;
    let mut change = |field: &str, old: String, new: String| {
        changes.push(FieldChange {
            field: field.to_string(),
            old_value: old,
            new_value: new,
        })
    };
    if prev.phase != cur.phase {
        change("phase", prev.phase.to_string(), cur.phase.to_string());
        significance += weights.phase;
    }
    if prev.severity != cur.severity {
        change(
            "severity",
            prev.severity.to_string(),
            cur.severity.to_string(),
        );
        significance += weights.severity;
    }
    let added = added_entities(prev, cur);
    if !added.is_empty() {
        change(
            "affected_entities",
            entity_names(&prev.affected_entities),
            entity_names(&cur.affected_entities),
        );
        significance += (weights.entity_each * added.len() as f64).min(weights.entity_cap);
    }
    let mut mitigation_group = false;
    if prev.mitigations_in_flight != cur.mitigations_in_flight {
        change(
            "mitigations_in_flight",
            joined(&prev.mitigations_in_flight),
            joined(&cur.mitigations_in_flight),
        );
        mitigation_group = true;
    }
    if prev.resolution_notes != cur.resolution_notes {
        change(
            "resolution_notes",
            joined(&prev.resolution_notes),
            joined(&cur.resolution_notes),
        );
        mitigation_group = true;
    }
    if mitigation_group {
        significance += weights.mitigations;
    }
    if prev.open_hypotheses != cur.open_hypotheses {
        change(
            "open_hypotheses",
            joined(&prev.open_hypotheses),
            joined(&cur.open_hypotheses),
        );
        significance += weights.hypotheses;
    }
    Ok(StateDelta {
        from_window,
        to_window: cur.window_index,
        changed_fields: changes,
        significance: significance.clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Phase,
    Severity,
    Entities,
    Mitigations,
    Hypotheses,
}

fn group_of(field: &str) -> Group {
    match field {
        "phase" => Group::Phase,
        "severity" => Group::Severity,
        "affected_entities" => Group::Entities,
        "open_hypotheses" => Group::Hypotheses,
        _ => Group::Mitigations,
    }
}

fn new_items<'a>(prev: &[String], cur: &'a [String]) -> Vec<&'a String> {
    cur.iter().filter(|x| !prev.contains(x)).collect()
}

/// Decides whether an observation supports a group's change.
type Supports<'a> = Box<dyn Fn(&Observation) -> bool + 'a>;

/// Turns a delta into critical events, one per changed field group.
///
/// Nothing is promoted below `threshold`. Evidence for each event is the set
/// of window observations whose tags support that group's change; summaries
/// come from the gateway at temperature 0. `next_id` numbers events within
/// the incident and is advanced.
#[allow(clippy::too_many_arguments)]
pub fn promote(
    delta: &StateDelta,
    prev: Option<&ContextState>,
    cur: &ContextState,
    observations: &[Observation],
    threshold: f64,
    weights: &DeltaWeights,
    gateway: &Gateway,
    next_id: &mut u64,
) -> Result<Vec<CriticalEvent>, PerceptionError> {
    if delta.significance < threshold || delta.changed_fields.is_empty() || observations.is_empty()
    {
        return Ok(Vec::new());
    }
    let baseline = ContextState::baseline(&cur.incident_id, cur.window_start);
    let prev = prev.unwrap_or(&baseline);
    let mut groups: Vec<Group> = Vec::new();
    for c in &delta.changed_fields {
        let g = group_of(&c.field);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }

    let mut events = Vec::new();
    for group in groups {
        let (kind, change, weight, supports): (EventKind, String, f64, Supports<'_>) = match group {
            Group::Phase => (
                EventKind::PhaseTransition,
                format!("phase {} -> {}", prev.phase, cur.phase),
                weights.phase,
                Box::new(|o: &Observation| {
                    o.tags.phase == cur.phase
                        || explicit_phase(&o.signal).is_some_and(|(p, _)| p == cur.phase)
                }),
            ),
            Group::Severity => (
                EventKind::SeverityChange,
                format!("severity {} -> {}", prev.severity, cur.severity),
                weights.severity,
                Box::new(|o: &Observation| o.tags.severity == cur.severity),
            ),
            Group::Entities => {
                let added: Vec<EntityRef> =
                    added_entities(prev, cur).into_iter().cloned().collect();
                let text = format!("scope expanded to {}", entity_names(&added));
                let weight = (weights.entity_each * added.len() as f64).min(weights.entity_cap);
                (
                    EventKind::ScopeExpansion,
                    text,
                    weight,
                    Box::new(move |o: &Observation| {
                        o.entities
                            .iter()
                            .any(|e| added.iter().any(|a| a.same_entity(e)))
                    }),
                )
            }
            Group::Mitigations => {
                let notes = new_items(&prev.resolution_notes, &cur.resolution_notes);
                let started = new_items(&prev.mitigations_in_flight, &cur.mitigations_in_flight);
                let (kind, text) = if !notes.is_empty()
                    && notes.iter().all(|n| n.starts_with(DEPENDENCY_PREFIX))
                {
                    (
                        EventKind::DependencyRecovery,
                        format!(
                            "dependency recovered: {}",
                            notes
                                .iter()
                                .map(|n| n.trim_start_matches(DEPENDENCY_PREFIX))
                                .collect::<Vec<_>>()
                                .join(" ;; ")
                        ),
                    )
                } else if !notes.is_empty() {
                    (
                        EventKind::MitigationComplete,
                        format!(
                            "mitigation completed ({}): {}",
                            joined(&prev.mitigations_in_flight),
                            notes
                                .iter()
                                .map(|n| n.as_str())
                                .collect::<Vec<_>>()
                                .join(" ;; ")
                        ),
                    )
                } else if !started.is_empty() {
                    (
                        EventKind::MitigationStart,
                        format!(
                            "mitigation started: {}",
                            started
                                .iter()
                                .map(|s| s.as_str())
                                .collect::<Vec<_>>()
                                .join(" ;; ")
                        ),
                    )
                } else {
                    (EventKind::Other, "mitigations changed".to_string())
                };
                (
                    kind,
                    text,
                    weights.mitigations,
                    Box::new(|o: &Observation| {
                        matches!(
                            o.tags.event_type.as_str(),
                            EVENT_MITIGATION_START
                                | EVENT_MITIGATION_COMPLETE
                                | EVENT_DEPENDENCY_RECOVERY
                        )
                    }),
                )
            }
            Group::Hypotheses => {
                let added = new_items(&prev.open_hypotheses, &cur.open_hypotheses);
                let confirmed: Vec<&str> = added
                    .iter()
                    .filter_map(|h| h.strip_prefix(CONFIRMED_PREFIX))
                    .collect();
                let (kind, text) = if confirmed.is_empty() {
                    (
                        EventKind::Other,
                        format!(
                            "hypotheses raised: {}",
                            added
                                .iter()
                                .map(|s| s.as_str())
                                .collect::<Vec<_>>()
                                .join(" ;; ")
                        ),
                    )
                } else {
                    (
                        EventKind::RootCauseIdentified,
                        format!("root cause confirmed: {}", confirmed.join(" ;; ")),
                    )
                };
                (
                    kind,
                    text,
                    weights.hypotheses,
                    Box::new(|o: &Observation| {
                        matches!(
                            o.tags.event_type.as_str(),
                            EVENT_HYPOTHESIS | EVENT_ROOT_CAUSE
                        )
                    }),
                )
            }
        };
        let mut evidence: Vec<&Observation> = observations.iter().filter(|o| supports(o)).collect();
        if evidence.is_empty() {
            evidence = observations.iter().collect();
        }
        let evidence_lines: Vec<String> = evidence
            .iter()
            .map(|o| format!("- {}", prompt::clean(&o.signal.payload)))
            .collect();
        let req = CompletionRequest::new(SchemaHint::EventSummary)
            .section(prompt::EVENT_KIND, kind.as_str())
            .section(prompt::CHANGE, change.clone())
            .section(prompt::EVIDENCE, evidence_lines.join("\n"))
            .traced(&cur.incident_id, cur.window_end, None);
        let out: SummaryOut = gateway.complete_as(&req)?;
        *next_id += 1;
        events.push(CriticalEvent {
            event_id: format!("{}-ev-{:04}", cur.incident_id, *next_id),
            incident_id: cur.incident_id.clone(),
            ts: cur.window_end,
            window_index: cur.window_index,
            kind,
            summary: truncate_chars(out.summary.trim(), SUMMARY_CHARS),
            delta: change,
            evidence: evidence.iter().map(|o| o.dedup_key.clone()).collect(),
            phase: cur.phase,
            significance: weight.clamp(0.0, 1.0),
        });
    }
    Ok(events)
}
