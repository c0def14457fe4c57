//! Perception layer: raw signals in, windowed context states and promoted
//! critical events out.
//!
//! Each signal is normalized and deduplicated, enriched with topology
//! context, and tagged by rules. Observations are bucketed into fixed-length
//! windows of incident time; each closed window is folded into a
//! [`ContextState`], diffed against its predecessor, and significant deltas
//! become [`CriticalEvent`]s.

mod classify;
mod topology;
mod types;
mod window;

pub use classify::{
    classify, dedup_key, explicit_phase, normalize, rule_event_type, Normalized, EVENT_ALERT,
    EVENT_DEPENDENCY_RECOVERY, EVENT_HYPOTHESIS, EVENT_MITIGATION_COMPLETE,
    EVENT_MITIGATION_PROGRESS, EVENT_MITIGATION_START, EVENT_ROOT_CAUSE, EVENT_SCOPE_CHANGE,
    EVENT_STATUS,
};
pub use topology::{
    enrich, entities_from_attrs, Topology, TopologyEdge, TopologyEntity, TopologyFile,
};
pub use types::*;
pub use window::{
    aggregate, compute_delta, promote, DeltaWeights, CONFIRMED_PREFIX, DEPENDENCY_PREFIX,
};

use crate::llm_gateway::{Gateway, GatewayError};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum PerceptionError {
    #[error("temporal violation: {0}")]
    TemporalViolation(String),

    #[error("unknown modality `{0}`")]
    UnknownModality(String),

    #[error("malformed signal: {0}")]
    Malformed(String),

    #[error("source `{0}` is not in the allow-list")]
    UntrustedSource(String),

    #[error("topology unavailable: {0}")]
    TopologyUnavailable(String),

    #[error("window order violation: expected window {expected}, got {got}")]
    WindowOrderViolation { expected: u64, got: u64 },

    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub window_length_s: u64,
    pub promote_threshold: f64,
    pub weights: DeltaWeights,
    pub clock_skew_s: u64,
    /// When set, signals from other sources are rejected.
    pub allowed_sources: Option<Vec<String>>,
    /// Ask the gateway for an event type when no rule fires.
    pub llm_fallback: bool,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            window_length_s: 300,
            promote_threshold: 0.3,
            weights: DeltaWeights::default(),
            clock_skew_s: 300,
            allowed_sources: None,
            llm_fallback: true,
        }
    }
}

impl PerceptionConfig {
    pub fn window(&self) -> Duration {
        Duration::seconds(self.window_length_s as i64)
    }
}

/// Parses one trace line, reporting an unknown modality by name.
pub fn parse_signal_line(line: &str) -> Result<RawSignal, PerceptionError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| PerceptionError::Malformed(e.to_string()))?;
    if let Some(m) = value.get("modality").and_then(|m| m.as_str()) {
        if Modality::parse(m).is_none() {
            return Err(PerceptionError::UnknownModality(m.to_string()));
        }
    }
    serde_json::from_value(value).map_err(|e| PerceptionError::Malformed(e.to_string()))
}

/// Result of closing one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub state: ContextState,
    pub delta: StateDelta,
    pub events: Vec<CriticalEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub dedup_key: String,
    pub duplicate: bool,
    /// Windows closed because this signal moved incident time past them.
    pub closed: Vec<WindowOutcome>,
}

/// Single-writer perception state for one incident.
pub struct IncidentPerception {
    incident_id: String,
    cfg: PerceptionConfig,
    gateway: Arc<Gateway>,
    topology: Arc<Topology>,
    origin: DateTime<Utc>,
    seen: HashSet<String>,
    current_window: u64,
    buffer: Vec<Observation>,
    prev: Option<ContextState>,
    store: BTreeMap<String, Observation>,
    next_event: u64,
}

impl std::fmt::Debug for IncidentPerception {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IncidentPerception")
            .field("incident_id", &self.incident_id)
            .field("current_window", &self.current_window)
            .field("observations", &self.store.len())
            .finish_non_exhaustive()
    }
}

impl IncidentPerception {
    /// Windows are laid out from `origin` in steps of the configured length.
    pub fn new(
        incident_id: &str,
        origin: DateTime<Utc>,
        cfg: PerceptionConfig,
        gateway: Arc<Gateway>,
        topology: Arc<Topology>,
    ) -> Self {
        Self {
            incident_id: incident_id.to_string(),
            cfg,
            gateway,
            topology,
            origin,
            seen: HashSet::new(),
            current_window: 0,
            buffer: Vec::new(),
            prev: None,
            store: BTreeMap::new(),
            next_event: 0,
        }
    }

    pub fn origin(&self) -> DateTime<Utc> {
        self.origin
    }

    pub fn current_window(&self) -> u64 {
        self.current_window
    }

    /// State of the most recently closed window.
    pub fn latest_state(&self) -> Option<&ContextState> {
        self.prev.as_ref()
    }

    pub fn observation(&self, dedup_key: &str) -> Option<&Observation> {
        self.store.get(dedup_key)
    }

    pub fn observation_count(&self) -> usize {
        self.store.len()
    }

    fn window_bounds(&self, index: u64) -> (DateTime<Utc>, DateTime<Utc>) {
        let start = self.origin + self.cfg.window() * index as i32;
        (start, start + self.cfg.window())
    }

    fn window_of(&self, ts: DateTime<Utc>) -> Option<u64> {
        if ts < self.origin {
            return None;
        }
        let offset_ms = (ts - self.origin).num_milliseconds();
        Some((offset_ms / (self.cfg.window_length_s as i64 * 1000)) as u64)
    }

    /// Processes one signal in arrival order.
    ///
    /// A signal older than the open window is rejected: windows already
    /// closed are never revisited.
    pub fn ingest(
        &mut self,
        sig: RawSignal,
        now: DateTime<Utc>,
    ) -> Result<Ingested, PerceptionError> {
        if sig.incident_id != self.incident_id {
            return Err(PerceptionError::Malformed(format!(
                "signal for `{}` routed to `{}`",
                sig.incident_id, self.incident_id
            )));
        }
        let target = self.window_of(sig.ts).ok_or_else(|| {
            PerceptionError::TemporalViolation("signal predates the incident origin".into())
        })?;
        if target < self.current_window {
            return Err(PerceptionError::TemporalViolation(format!(
                "signal belongs to closed window {target}; open window is {}",
                self.current_window
            )));
        }
        let normalized = normalize(
            sig,
            &mut self.seen,
            now,
            Duration::seconds(self.cfg.clock_skew_s as i64),
            self.cfg.allowed_sources.as_deref(),
        )?;
        let closed = self.close_until(target)?;
        match normalized {
            Normalized::Duplicate(key) => Ok(Ingested {
                dedup_key: key,
                duplicate: true,
                closed,
            }),
            Normalized::Observation(obs) => {
                let mut obs = *obs;
                if self.topology.is_empty() {
                    obs.entities = entities_from_attrs(&obs);
                } else {
                    obs = enrich(obs, &self.topology)?;
                }
                let (phase, summary) = match &self.prev {
                    Some(p) => (p.phase, Some(p.summary.as_str())),
                    None => (crate::domain::Phase::Detect, None),
                };
                let obs = classify(obs, phase, summary, &self.gateway, self.cfg.llm_fallback);
                let key = obs.dedup_key.clone();
                self.store.insert(key.clone(), obs.clone());
                self.buffer.push(obs);
                Ok(Ingested {
                    dedup_key: key,
                    duplicate: false,
                    closed,
                })
            }
        }
    }

    /// Closes every window that ends at or before `ts`.
    pub fn advance_to(&mut self, ts: DateTime<Utc>) -> Result<Vec<WindowOutcome>, PerceptionError> {
        match self.window_of(ts) {
            Some(target) if target > self.current_window => self.close_until(target),
            _ => Ok(Vec::new()),
        }
    }

    /// Closes the open window early, e.g. when the incident is closed.
    pub fn flush(&mut self) -> Result<WindowOutcome, PerceptionError> {
        let out = self.close_current()?;
        Ok(out)
    }

    fn close_until(&mut self, target: u64) -> Result<Vec<WindowOutcome>, PerceptionError> {
        let mut out = Vec::new();
        while self.current_window < target {
            out.push(self.close_current()?);
        }
        Ok(out)
    }

    fn close_current(&mut self) -> Result<WindowOutcome, PerceptionError> {
        let index = self.current_window;
        let bounds = self.window_bounds(index);
        let observations = std::mem::take(&mut self.buffer);
        let state = aggregate(
            &self.incident_id,
            index,
            bounds,
            &observations,
            self.prev.as_ref(),
            &self.gateway,
        )?;
        let delta = compute_delta(self.prev.as_ref(), &state, &self.cfg.weights)?;
        let events = promote(
            &delta,
            self.prev.as_ref(),
            &state,
            &observations,
            self.cfg.promote_threshold,
            &self.cfg.weights,
            &self.gateway,
            &mut self.next_event,
        )?;
        self.prev = Some(state.clone());
        self.current_window += 1;
        Ok(WindowOutcome {
            state,
            delta,
            events,
        })
    }
}
