//! Normalization and rule-first tagging of signals.

use super::types::{Modality, Observation, RawSignal, Tags};
use super::PerceptionError;
use crate::domain::{phrase_haystack, phrase_in, Phase, Severity};
use crate::llm_gateway::{
    cosine, prompt, schema::EventTypeOut, CompletionRequest, Gateway, SchemaHint,
};
use crate::text::canonicalize;
use chrono::{DateTime, Duration, DurationRound, Utc};
use sha2::{Digest, Sha256};
use std::collections::HashSet;

pub const EVENT_ROOT_CAUSE: &str = "root_cause";
pub const EVENT_HYPOTHESIS: &str = "hypothesis";
pub const EVENT_DEPENDENCY_RECOVERY: &str = "dependency_recovery";
pub const EVENT_MITIGATION_COMPLETE: &str = "mitigation_complete";
pub const EVENT_MITIGATION_PROGRESS: &str = "mitigation_progress";
pub const EVENT_MITIGATION_START: &str = "mitigation_start";
pub const EVENT_SCOPE_CHANGE: &str = "scope_change";
pub const EVENT_ALERT: &str = "alert";
pub const EVENT_STATUS: &str = "status_update";

/// Ordered rule table: the first row with a matching cue decides.
const EVENT_RULES: &[(&str, &[&str])] = &[
    (
        EVENT_ROOT_CAUSE,
        &[
            "root cause identified",
            "root cause confirmed",
            "confirmed root cause",
            "root caused",
            "root cause is",
        ],
    ),
    (
        EVENT_DEPENDENCY_RECOVERY,
        &[
            "dependency recovered",
            "dependency restored",
            "upstream recovered",
            "upstream restored",
            "downstream recovered",
            "dependency is healthy",
        ],
    ),
    (
        EVENT_MITIGATION_COMPLETE,
        &[
            "mitigation complete",
            "mitigation completed",
            "restored",
            "recovered",
            "back to normal",
            "healthy again",
            "stabilized",
            "failover complete",
            "rollback complete",
        ],
    ),
    (
        EVENT_MITIGATION_PROGRESS,
        &[
            "mitigation applied",
            "error rate dropping",
            "errors dropping",
            "improving",
            "stabilizing",
            "recovering",
        ],
    ),
    (
        EVENT_MITIGATION_START,
        &[
            "mitigation started",
            "starting mitigation",
            "engaged",
            "engaging",
            "failing over",
            "initiating failover",
            "rolling back",
            "restarting",
            "throttling",
            "rerouting",
            "draining",
            "scaling out",
        ],
    ),
    (
        EVENT_HYPOTHESIS,
        &[
            "suspect",
            "suspected",
            "hypothesis",
            "possible cause",
            "likely cause",
            "might be caused",
            "could be caused",
        ],
    ),
    (
        EVENT_SCOPE_CHANGE,
        &[
            "also affected",
            "also impacted",
            "now impacting",
            "spreading",
            "additional region",
            "expanding impact",
        ],
    ),
];

/// Content fingerprint used to drop repeated observations.
pub fn dedup_key(source: &str, payload: &str, ts: DateTime<Utc>) -> String {
    let minute = ts
        .duration_trunc(Duration::minutes(1))
        .unwrap_or(ts)
        .timestamp();
    let mut h = Sha256::new();
    h.update(source.trim().to_lowercase().as_bytes());
    h.update([0u8]);
    h.update(canonicalize(payload).as_bytes());
    h.update([0u8]);
    h.update(minute.to_le_bytes());
    format!("obs-{}", hex::encode(&h.finalize()[..8]))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Normalized {
    Observation(Box<Observation>),
    Duplicate(String),
}

/// Validates a signal and computes its dedup key.
///
/// `seen` holds the keys already accepted for this incident; it is updated.
pub fn normalize(
    mut sig: RawSignal,
    seen: &mut HashSet<String>,
    now: DateTime<Utc>,
    clock_skew: Duration,
    allowed_sources: Option<&[String]>,
) -> Result<Normalized, PerceptionError> {
    if sig.incident_id.trim().is_empty() {
        return Err(PerceptionError::Malformed("incident_id is empty".into()));
    }
    if sig.ts > now + clock_skew {
        return Err(PerceptionError::TemporalViolation(format!(
            "signal ts {} is beyond now {} plus skew",
            prompt::fmt_ts(sig.ts),
            prompt::fmt_ts(now)
        )));
    }
    if let Some(allowed) = allowed_sources {
        if !allowed
            .iter()
            .any(|s| s.eq_ignore_ascii_case(sig.source.trim()))
        {
            return Err(PerceptionError::UntrustedSource(sig.source.clone()));
        }
    }
    sig.ts = sig
        .ts
        .duration_trunc(Duration::milliseconds(1))
        .unwrap_or(sig.ts);
    let key = dedup_key(&sig.source, &sig.payload, sig.ts);
    if !seen.insert(key.clone()) {
        return Ok(Normalized::Duplicate(key));
    }
    Ok(Normalized::Observation(Box::new(Observation {
        signal: sig,
        dedup_key: key,
        entities: Vec::new(),
        tags: Tags {
            phase: Phase::Detect,
            event_type: EVENT_STATUS.into(),
            severity: Severity::Unknown,
            relevance: 1.0,
        },
        dependency_context: Vec::new(),
    })))
}

/// Rule-table event type; `None` when no rule fires.
pub fn rule_event_type(payload: &str, modality: Modality) -> Option<&'static str> {
    let hay = phrase_haystack(payload);
    EVENT_RULES
        .iter()
        .find(|(_, cues)| cues.iter().any(|c| phrase_in(&hay, c)))
        .map(|(t, _)| *t)
        .or((modality == Modality::Telemetry).then_some(EVENT_ALERT))
}

/// Explicit phase carried by the signal, if any. `phase_transition` may move
/// the incident backwards; `phase` only tags.
pub fn explicit_phase(sig: &RawSignal) -> Option<(Phase, bool)> {
    if let Some(p) = sig.attr("phase_transition").and_then(|v| v.parse().ok()) {
        return Some((p, true));
    }
    sig.attr("phase")
        .and_then(|v| v.parse().ok())
        .map(|p| (p, false))
}

/// Tags an observation.
///
/// Structured attributes beat text inference. Relevance is the clipped
/// cosine between the payload and the current context summary, or 1.0 when
/// there is no summary yet. When the rule table yields no event type the
/// gateway is asked, unless `fallback` is false.
pub fn classify(
    mut obs: Observation,
    incident_phase: Phase,
    context_summary: Option<&str>,
    gateway: &Gateway,
    fallback: bool,
) -> Observation {
    let sig = &obs.signal;
    let phase = explicit_phase(sig)
        .map(|(p, _)| p)
        .or_else(|| Phase::infer(&sig.payload))
        .unwrap_or(incident_phase);
    let severity = sig
        .attr("severity")
        .and_then(Severity::canonicalize)
        .or_else(|| Severity::infer(&sig.payload))
        .unwrap_or(Severity::Unknown);
    let event_type = rule_event_type(&sig.payload, sig.modality)
        .map(str::to_string)
        .or_else(|| {
            if !fallback {
                return None;
            }
            let req = CompletionRequest::new(SchemaHint::EventType)
                .section(prompt::OBSERVATION, sig.payload.clone());
            gateway
                .complete_as::<EventTypeOut>(&req)
                .ok()
                .map(|o| o.event_type)
                .filter(|t| !t.trim().is_empty())
        })
        .unwrap_or_else(|| EVENT_STATUS.to_string());
    let relevance = match context_summary.filter(|s| !s.trim().is_empty()) {
        None => 1.0,
        // An empty payload fails to embed and scores zero.
        Some(summary) => gateway
            .embed(&[sig.payload.as_str(), summary])
            .map(|v| cosine(&v[0].values, &v[1].values).clamp(0.0, 1.0))
            .unwrap_or(0.0),
    };
    obs.tags = Tags {
        phase,
        event_type,
        severity,
        relevance,
    };
    obs
}
