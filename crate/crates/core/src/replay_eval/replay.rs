//! Trace replay through the live engine on a virtual clock.

use super::{EvalError, Trace};
use crate::clock::VirtualClock;
use crate::config::SystemConfig;
use crate::domain::Outcome;
use crate::memory::Memory;
use crate::perception::Topology;
use crate::reasoning::{FeedbackInput, FeedbackRecord, Recommendation};
use crate::service::{CreateIncident, Engine, StreamKind, StreamRecord};
use chrono::Duration;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Signal attribute marking a reported human action. Such signals are posted
/// as feedback, as a responder would through the console.
pub const ACTION_RESULT_ATTR: &str = "action_result";

/// Everything one replay produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayLog {
    pub trace_id: String,
    pub incident_id: String,
    pub recommendations: Vec<Recommendation>,
    pub feedback: Vec<FeedbackRecord>,
    pub n_observations: usize,
    pub n_duplicates: usize,
    pub n_events: usize,
    pub case_id: Option<String>,
    pub stream: Vec<StreamRecord>,
}

/// Feeds `trace` through a fresh engine over `memory` in trace-time order.
///
/// The clock follows the trace; after the last signal it moves one window
/// further so the final window is processed like any other, then the
/// incident is closed, which promotes it to episodic memory. `memory` keeps
/// the end state for inspection.
pub fn replay(
    trace: &Trace,
    cfg: &SystemConfig,
    memory: Arc<Memory>,
    topology: Arc<Topology>,
) -> Result<ReplayLog, EvalError> {
    trace.validate()?;
    let meta = &trace.meta;
    let clock = VirtualClock::new(meta.started_at);
    let engine = Engine::with_memory(cfg.clone(), memory, topology, Arc::new(clock.clone()), None)?;
    let id = meta.incident_id.as_str();
    engine.create_incident(CreateIncident {
        incident_id: Some(id.to_string()),
        title: meta.title.clone(),
        service: meta.service.clone(),
        severity: Some(meta.severity),
        started_at: Some(meta.started_at),
    })?;

    let mut n_observations = 0;
    let mut n_duplicates = 0;
    for (position, signal) in trace.signals.iter().enumerate() {
        clock.advance_to(signal.ts);
        let at = |source| EvalError::Replay { position, source };
        match signal.attr(ACTION_RESULT_ATTR) {
            Some(result) => {
                engine
                    .post_feedback(
                        id,
                        FeedbackInput {
                            rec_id: None,
                            ts: signal.ts,
                            human_action_text: signal.payload.clone(),
                            dismissed: false,
                            result: Outcome::parse(result),
                        },
                    )
                    .map_err(at)?;
            }
            None => {
                let ack = engine.ingest_signal(id, signal.clone()).map_err(at)?;
                if ack.duplicate {
                    n_duplicates += 1;
                } else {
                    n_observations += 1;
                }
            }
        }
    }
    let end = trace.signals.last().map_or(meta.started_at, |s| s.ts)
        + Duration::seconds(cfg.perception.window_length_s as i64);
    clock.advance_to(end);
    let position = trace.signals.len();
    engine
        .advance_to(id, end)
        .map_err(|source| EvalError::Replay { position, source })?;
    let closed = engine
        .close_incident(id)
        .map_err(|source| EvalError::Replay { position, source })?;

    let stream = engine.records(id, 0)?;
    Ok(ReplayLog {
        trace_id: meta.trace_id.clone(),
        incident_id: id.to_string(),
        recommendations: engine.recommendations(id)?,
        feedback: engine.feedback(id)?,
        n_observations,
        n_duplicates,
        n_events: stream
            .iter()
            .filter(|r| r.kind == StreamKind::CriticalEvent)
            .count(),
        case_id: closed.case_id,
        stream,
    })
}
