//! Working memory of one live incident.

use super::MemoryError;
use crate::domain::{Outcome, Phase, Severity};
use crate::perception::{ContextState, CriticalEvent};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentMeta {
    pub service: String,
    pub severity: Severity,
    pub title: String,
    pub opened_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptedAction {
    pub action_text: String,
    pub ts: DateTime<Utc>,
    /// Free-text result as reported by the operator.
    pub result: String,
    pub outcome: Outcome,
    /// The operator declined the action instead of running it.
    #[serde(default)]
    pub dismissed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rec_id: Option<String>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub ts: DateTime<Utc>,
    pub text: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionNote {
    pub ts: DateTime<Utc>,
    pub stage: Phase,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampedEvent {
    pub event: CriticalEvent,
    pub seq: u64,
}

/// One item appended to working memory.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkingItem {
    Event(CriticalEvent),
    Action {
        action_text: String,
        ts: DateTime<Utc>,
        result: String,
        outcome: Outcome,
        dismissed: bool,
        rec_id: Option<String>,
    },
    Note {
        ts: DateTime<Utc>,
        text: String,
    },
    Context(ContextState),
    Precondition(PreconditionNote),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkingCaps {
    pub events: usize,
    pub notes: usize,
}

impl Default for WorkingCaps {
    fn default() -> Self {
        Self {
            events: 50,
            notes: 50,
        }
    }
}

/// Entry of the merged timeline view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TimelineEntry {
    Event {
        ts: DateTime<Utc>,
        seq: u64,
        event_id: String,
        summary: String,
    },
    Action {
        ts: DateTime<Utc>,
        seq: u64,
        action_text: String,
        result: String,
    },
    Note {
        ts: DateTime<Utc>,
        seq: u64,
        text: String,
    },
}

impl TimelineEntry {
    pub fn ts(&self) -> DateTime<Utc> {
        match self {
            TimelineEntry::Event { ts, .. }
            | TimelineEntry::Action { ts, .. }
            | TimelineEntry::Note { ts, .. } => *ts,
        }
    }

    fn seq(&self) -> u64 {
        match self {
            TimelineEntry::Event { seq, .. }
            | TimelineEntry::Action { seq, .. }
            | TimelineEntry::Note { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingMemoryState {
    pub incident_id: String,
    pub meta: IncidentMeta,
    pub current_stage: Phase,
    pub recent_events: VecDeque<StampedEvent>,
    pub attempted_actions: Vec<AttemptedAction>,
    pub conversation_notes: VecDeque<Note>,
    pub latest_context: Option<ContextState>,
    /// Every event id ever recorded, oldest first. Unbounded but small.
    pub event_log: Vec<String>,
    pub preconditions: Vec<PreconditionNote>,
    pub caps: WorkingCaps,
    pub closed_at: Option<DateTime<Utc>>,
    pub promoted: bool,
    next_seq: u64,
}

impl WorkingMemoryState {
    pub fn open(incident_id: &str, meta: IncidentMeta, caps: WorkingCaps) -> Self {
        Self {
            incident_id: incident_id.to_string(),
            meta,
            current_stage: Phase::Detect,
            recent_events: VecDeque::new(),
            attempted_actions: Vec::new(),
            conversation_notes: VecDeque::new(),
            latest_context: None,
            event_log: Vec::new(),
            preconditions: Vec::new(),
            caps,
            closed_at: None,
            promoted: false,
            next_seq: 0,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed_at.is_some()
    }

    fn seq(&mut self) -> u64 {
        self.next_seq += 1;
        self.next_seq
    }

    /// Appends one item, evicting oldest-first past the caps.
    pub fn record(&mut self, item: WorkingItem) -> Result<(), MemoryError> {
        if self.is_closed() {
            return Err(MemoryError::IncidentClosed(self.incident_id.clone()));
        }
        match item {
            WorkingItem::Event(ev) => {
                let seq = self.seq();
                self.current_stage = self.current_stage.max(ev.phase);
                self.event_log.push(ev.event_id.clone());
                self.recent_events
                    .push_back(StampedEvent { event: ev, seq });
                while self.recent_events.len() > self.caps.events {
                    self.recent_events.pop_front();
                }
            }
            WorkingItem::Action {
                action_text,
                ts,
                result,
                outcome,
                dismissed,
                rec_id,
            } => {
                let seq = self.seq();
                self.attempted_actions.push(AttemptedAction {
                    action_text,
                    ts,
                    result,
                    outcome,
                    dismissed,
                    rec_id,
                    seq,
                });
            }
            WorkingItem::Note { ts, text } => {
                let seq = self.seq();
                self.conversation_notes.push_back(Note { ts, text, seq });
                while self.conversation_notes.len() > self.caps.notes {
                    self.conversation_notes.pop_front();
                }
            }
            WorkingItem::Context(state) => {
                let newer = self
                    .latest_context
                    .as_ref()
                    .is_none_or(|c| state.window_index >= c.window_index);
                if newer {
                    // A context may move the stage back when an operator
                    // declared a regression; events only ever move it forward.
                    self.current_stage = state.phase;
                    self.latest_context = Some(state);
                }
            }
            WorkingItem::Precondition(p) => self.preconditions.push(p),
        }
        Ok(())
    }

    /// Events, actions and notes merged in timestamp order; arrival order
    /// breaks ties.
    pub fn timeline(&self) -> Vec<TimelineEntry> {
        let mut out: Vec<TimelineEntry> = self
            .recent_events
            .iter()
            .map(|e| TimelineEntry::Event {
                ts: e.event.ts,
                seq: e.seq,
                event_id: e.event.event_id.clone(),
                summary: e.event.summary.clone(),
            })
            .chain(
                self.attempted_actions
                    .iter()
                    .map(|a| TimelineEntry::Action {
                        ts: a.ts,
                        seq: a.seq,
                        action_text: a.action_text.clone(),
                        result: a.result.clone(),
                    }),
            )
            .chain(self.conversation_notes.iter().map(|n| TimelineEntry::Note {
                ts: n.ts,
                seq: n.seq,
                text: n.text.clone(),
            }))
            .collect();
        out.sort_by(|a, b| a.ts().cmp(&b.ts()).then(a.seq().cmp(&b.seq())));
        out
    }

    /// Actions that were carried out, excluding dismissals.
    pub fn executed_actions(&self) -> impl Iterator<Item = &AttemptedAction> {
        self.attempted_actions.iter().filter(|a| !a.dismissed)
    }
}
