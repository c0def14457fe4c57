use super::stream::{Offer, StreamKind, StreamLog, StreamRecord};
use super::ServiceError;
use crate::clock::Clock;
use crate::config::SystemConfig;
use crate::domain::{Phase, Severity};
use crate::llm_gateway::{Gateway, PromptLog};
use crate::memory::{
    ConsolidationReport, EpisodicCase, IncidentMeta, KcaEntry, KcaPatch, Memory, MemoryError,
    PlaybookDoc, PreconditionNote, ReviewOp, ReviewResult, WorkingItem,
};
use crate::perception::{IncidentPerception, RawSignal, Topology, WindowOutcome};
use crate::reasoning::{
    expire_recommendations, Decision, DecisionOutcome, FeedbackInput, FeedbackRecord, Reasoner,
    Recommendation, StatsMode,
};
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

const META_FILE: &str = "meta.json";
const INPUTS_FILE: &str = "inputs.jsonl";
const STREAM_FILE: &str = "stream.jsonl";
const PROMPTS_FILE: &str = "prompts.jsonl";
const RECS_FILE: &str = "recommendations.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncidentStatus {
    Open,
    Closed,
}

/// Request body for opening an incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateIncident {
    #[serde(default)]
    pub incident_id: Option<String>,
    pub title: String,
    #[serde(default)]
    pub service: String,
    #[serde(default)]
    pub severity: Option<Severity>,
    /// Origin of the incident's perception windows; defaults to now.
    #[serde(default)]
    pub started_at: Option<DateTime<Utc>>,
}

/// Persisted identity of an incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IncidentFile {
    incident_id: String,
    title: String,
    service: String,
    severity: Severity,
    created_at: DateTime<Utc>,
    started_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentHandle {
    pub incident_id: String,
    pub title: String,
    pub service: String,
    pub severity: Severity,
    pub created_at: DateTime<Utc>,
    pub started_at: DateTime<Utc>,
    pub status: IncidentStatus,
    pub current_stage: Phase,
    /// Seq of the last record on the incident's stream.
    pub stream_cursor: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalAck {
    /// Stream position after the signal was processed.
    pub seq: u64,
    pub dedup_key: String,
    pub duplicate: bool,
    pub windows_closed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub seq: u64,
    pub record: FeedbackRecord,
    /// The same feedback was accepted before; nothing changed.
    pub duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseReport {
    pub seq: u64,
    pub closed_at: DateTime<Utc>,
    pub case_id: Option<String>,
}

/// One journaled input with the host time it was applied at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Input {
    Signal {
        now: DateTime<Utc>,
        signal: RawSignal,
    },
    Feedback {
        now: DateTime<Utc>,
        input: FeedbackInput,
    },
    Advance {
        now: DateTime<Utc>,
        ts: DateTime<Utc>,
    },
    Close {
        now: DateTime<Utc>,
    },
}

struct State {
    meta: IncidentFile,
    status: IncidentStatus,
    perception: IncidentPerception,
    recs: Vec<Recommendation>,
    feedback: Vec<FeedbackRecord>,
    accepted_feedback: Vec<FeedbackInput>,
    decisions: u64,
    journal: Option<File>,
    rec_log: Option<File>,
}

struct Slot {
    id: String,
    stream: Arc<StreamLog>,
    prompts: Arc<Mutex<PromptLog>>,
    state: Mutex<State>,
}

/// The live pipeline. Each incident is processed by one serialized
/// pipeline; different incidents proceed concurrently.
pub struct Engine {
    cfg: SystemConfig,
    memory: Arc<Memory>,
    reasoner: Reasoner,
    topology: Arc<Topology>,
    clock: Arc<dyn Clock>,
    incidents_dir: Option<PathBuf>,
    slots: RwLock<BTreeMap<String, Arc<Slot>>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("incidents_dir", &self.incidents_dir)
            .field("incidents", &self.slots.read().len())
            .finish_non_exhaustive()
    }
}

fn validate_id(id: &str) -> Result<(), ServiceError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ServiceError::Invalid(format!(
            "incident id `{id}` must be 1-128 characters of [A-Za-z0-9._-]"
        )))
    }
}

fn append_line<T: Serialize>(file: &mut Option<File>, value: &T) -> Result<(), ServiceError> {
    if let Some(f) = file.as_mut() {
        let line = serde_json::to_string(value)?;
        writeln!(f, "{line}")?;
        f.flush()?;
    }
    Ok(())
}

fn open_append(path: &Path) -> std::io::Result<File> {
    OpenOptions::new().create(true).append(true).open(path)
}

impl Engine {
    /// Builds an engine without persistence.
    pub fn in_memory(
        cfg: SystemConfig,
        gateway: Arc<Gateway>,
        topology: Arc<Topology>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let memory = Arc::new(Memory::in_memory(cfg.memory.clone(), gateway));
        Self::with_memory(cfg, memory, topology, clock, None)
    }

    /// Opens the engine over `data_dir`, recovering every persisted incident.
    pub fn open(
        cfg: SystemConfig,
        gateway: Arc<Gateway>,
        topology: Arc<Topology>,
        clock: Arc<dyn Clock>,
        data_dir: &Path,
    ) -> Result<Self, ServiceError> {
        let memory = Arc::new(Memory::open(
            &data_dir.join("memory"),
            cfg.memory.clone(),
            gateway,
        )?);
        let incidents = data_dir.join("incidents");
        std::fs::create_dir_all(&incidents)?;
        let engine = Self::with_memory(cfg, memory, topology, clock, Some(incidents.clone()))?;
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&incidents)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(META_FILE).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            engine.recover(&dir)?;
        }
        Ok(engine)
    }

    /// Builds an engine over an existing memory, e.g. one pre-loaded with a
    /// snapshot. `incidents_dir` enables persistence of incident logs.
    pub fn with_memory(
        cfg: SystemConfig,
        memory: Arc<Memory>,
        topology: Arc<Topology>,
        clock: Arc<dyn Clock>,
        incidents_dir: Option<PathBuf>,
    ) -> Result<Self, ServiceError> {
        let reasoner = Reasoner::new(memory.clone(), cfg.reasoning.clone())?;
        Ok(Self {
            cfg,
            memory,
            reasoner,
            topology,
            clock,
            incidents_dir,
            slots: RwLock::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &Arc<Memory> {
        &self.memory
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ServiceError> {
        self.slots
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownIncident(id.to_string()))
    }

    fn dir_of(&self, id: &str) -> Option<PathBuf> {
        self.incidents_dir.as_ref().map(|d| d.join(id))
    }

    fn build_slot(&self, meta: IncidentFile, fresh: bool) -> Result<Arc<Slot>, ServiceError> {
        let id = meta.incident_id.clone();
        let (stream, prompts, journal, rec_log) = match self.dir_of(&id) {
            Some(dir) => {
                std::fs::create_dir_all(&dir)?;
                if fresh {
                    let tmp = dir.join("meta.json.tmp");
                    std::fs::write(&tmp, serde_json::to_string_pretty(&meta)?)?;
                    std::fs::rename(tmp, dir.join(META_FILE))?;
                }
                (
                    StreamLog::open(&dir.join(STREAM_FILE))?,
                    PromptLog::open(&dir.join(PROMPTS_FILE))?,
                    Some(open_append(&dir.join(INPUTS_FILE))?),
                    Some(open_append(&dir.join(RECS_FILE))?),
                )
            }
            None => (StreamLog::in_memory(), PromptLog::in_memory(), None, None),
        };
        self.memory.open_incident(
            &id,
            IncidentMeta {
                service: meta.service.clone(),
                severity: meta.severity,
                title: meta.title.clone(),
                opened_at: meta.started_at,
            },
        );
        let perception = IncidentPerception::new(
            &id,
            meta.started_at,
            self.cfg.perception.clone(),
            self.memory.gateway().clone(),
            self.topology.clone(),
        );
        Ok(Arc::new(Slot {
            id,
            stream: Arc::new(stream),
            prompts: Arc::new(Mutex::new(prompts)),
            state: Mutex::new(State {
                meta,
                status: IncidentStatus::Open,
                perception,
                recs: Vec::new(),
                feedback: Vec::new(),
                accepted_feedback: Vec::new(),
                decisions: 0,
                journal,
                rec_log,
            }),
        }))
    }

    pub fn create_incident(&self, req: CreateIncident) -> Result<IncidentHandle, ServiceError> {
        let now = self.clock.now();
        if req.title.trim().is_empty() {
            return Err(ServiceError::Invalid("title is required".into()));
        }
        let mut slots = self.slots.write();
        let id = match req.incident_id {
            Some(id) => id.trim().to_string(),
            None => format!("inc-{:06}", slots.len() + 1),
        };
        validate_id(&id)?;
        if slots.contains_key(&id) || self.dir_of(&id).is_some_and(|d| d.join(META_FILE).exists()) {
            return Err(ServiceError::AlreadyExists(id));
        }
        let meta = IncidentFile {
            incident_id: id.clone(),
            title: req.title.trim().to_string(),
            service: req.service.trim().to_string(),
            severity: req.severity.unwrap_or(Severity::Unknown),
            created_at: now,
            started_at: req.started_at.unwrap_or(now),
        };
        let slot = self.build_slot(meta, true)?;
        slots.insert(id, slot.clone());
        drop(slots);
        let st = slot.state.lock();
        self.sync_prompt_log(&slot);
        self.emit_opened(&slot, &st)?;
        Ok(self.handle_of(&slot, &st))
    }

    fn emit_opened(&self, slot: &Slot, st: &State) -> Result<(), ServiceError> {
        self.emit(
            slot,
            None,
            StreamKind::State,
            st.meta.started_at,
            json!({
                "event": "opened",
                "incident_id": st.meta.incident_id,
                "title": st.meta.title,
                "service": st.meta.service,
                "severity": st.meta.severity,
            }),
        )?;
        Ok(())
    }

    /// Prompts are logged only for work that is not a re-derivation of
    /// records already on the persisted stream.
    fn sync_prompt_log(&self, slot: &Slot) {
        let gw = self.memory.gateway();
        if slot.stream.replaying() {
            gw.detach_log(&slot.id);
        } else {
            gw.attach_log(&slot.id, slot.prompts.clone());
        }
    }

    fn handle_of(&self, slot: &Slot, st: &State) -> IncidentHandle {
        let stage = self
            .memory
            .working_snapshot(&slot.id)
            .map(|w| w.current_stage)
            .unwrap_or(Phase::Detect);
        IncidentHandle {
            incident_id: st.meta.incident_id.clone(),
            title: st.meta.title.clone(),
            service: st.meta.service.clone(),
            severity: st.meta.severity,
            created_at: st.meta.created_at,
            started_at: st.meta.started_at,
            status: st.status,
            current_stage: stage,
            stream_cursor: slot.stream.last_seq(),
        }
    }

    /// Offers a record to the stream. Returns whether it was newly appended;
    /// side effects that must happen once are keyed on that. A record
    /// appended for the first time is also mirrored to `rec_log` when given.
    fn emit(
        &self,
        slot: &Slot,
        rec_log: Option<(&mut Option<File>, &Recommendation)>,
        kind: StreamKind,
        ts: DateTime<Utc>,
        body: serde_json::Value,
    ) -> Result<bool, ServiceError> {
        match slot.stream.offer(kind, ts, body)? {
            Offer::Appended(_) => {
                if let Some((file, rec)) = rec_log {
                    append_line(file, rec)?;
                }
                Ok(true)
            }
            Offer::Replayed { persisted, matches } => {
                if !matches {
                    tracing::warn!(
                        incident = %slot.id,
                        seq = persisted.seq,
                        "recovered record differs from the persisted one; keeping the persisted record"
                    );
                }
                Ok(false)
            }
        }
    }

    fn emit_status(
        &self,
        slot: &Slot,
        st: &mut State,
        rec_id: &str,
        ts: DateTime<Utc>,
    ) -> Result<(), ServiceError> {
        let rec = st
            .recs
            .iter()
            .find(|r| r.rec_id == rec_id)
            .cloned()
            .ok_or_else(|| ServiceError::Invalid(format!("unknown recommendation `{rec_id}`")))?;
        let body = json!({
            "event": "rec_status",
            "rec_id": rec.rec_id,
            "status": rec.status,
        });
        self.emit(
            slot,
            Some((&mut st.rec_log, &rec)),
            StreamKind::State,
            ts,
            body,
        )?;
        Ok(())
    }

    fn journal(&self, st: &mut State, input: &Input) -> Result<(), ServiceError> {
        append_line(&mut st.journal, input)
    }

    // Inputs.

    pub fn ingest_signal(
        &self,
        incident_id: &str,
        signal: RawSignal,
    ) -> Result<SignalAck, ServiceError> {
        let slot = self.slot(incident_id)?;
        let mut st = slot.state.lock();
        if st.status == IncidentStatus::Closed {
            return Err(ServiceError::IncidentClosed(incident_id.to_string()));
        }
        if signal.incident_id != incident_id {
            return Err(ServiceError::Invalid(format!(
                "signal is for `{}`, posted to `{incident_id}`",
                signal.incident_id
            )));
        }
        let now = self.clock.now();
        let input = Input::Signal { now, signal };
        self.journal(&mut st, &input)?;
        let Input::Signal { signal, .. } = input else {
            unreachable!()
        };
        self.apply_signal(&slot, &mut st, signal, now)
    }

    /// Closes every window that ends at or before `ts` without a signal,
    /// so a quiet incident still reaches its decision points.
    pub fn advance_to(&self, incident_id: &str, ts: DateTime<Utc>) -> Result<u64, ServiceError> {
        let slot = self.slot(incident_id)?;
        let mut st = slot.state.lock();
        if st.status == IncidentStatus::Closed {
            return Err(ServiceError::IncidentClosed(incident_id.to_string()));
        }
        let now = self.clock.now();
        self.journal(&mut st, &Input::Advance { now, ts })?;
        self.apply_advance(&slot, &mut st, ts)?;
        Ok(slot.stream.last_seq())
    }

    pub fn post_feedback(
        &self,
        incident_id: &str,
        input: FeedbackInput,
    ) -> Result<FeedbackAck, ServiceError> {
        let slot = self.slot(incident_id)?;
        let mut st = slot.state.lock();
        if st.status == IncidentStatus::Closed {
            return Err(ServiceError::IncidentClosed(incident_id.to_string()));
        }
        if let Some(i) = st.accepted_feedback.iter().position(|f| *f == input) {
            return Ok(FeedbackAck {
                seq: slot.stream.last_seq(),
                record: st.feedback[i].clone(),
                duplicate: true,
            });
        }
        let now = self.clock.now();
        let entry = Input::Feedback { now, input };
        self.journal(&mut st, &entry)?;
        let Input::Feedback { input, .. } = entry else {
            unreachable!()
        };
        let record = self.apply_feedback(&slot, &mut st, input)?;
        Ok(FeedbackAck {
            seq: slot.stream.last_seq(),
            record,
            duplicate: false,
        })
    }

    pub fn close_incident(&self, incident_id: &str) -> Result<CloseReport, ServiceError> {
        let slot = self.slot(incident_id)?;
        let mut st = slot.state.lock();
        if st.status == IncidentStatus::Closed {
            return Err(ServiceError::IncidentClosed(incident_id.to_string()));
        }
        let now = self.clock.now();
        self.journal(&mut st, &Input::Close { now })?;
        self.apply_close(&slot, &mut st)
    }

    // Application of journaled inputs. Shared by live requests and recovery.

    fn apply_signal(
        &self,
        slot: &Slot,
        st: &mut State,
        signal: RawSignal,
        now: DateTime<Utc>,
    ) -> Result<SignalAck, ServiceError> {
        self.sync_prompt_log(slot);
        let ing = st.perception.ingest(signal, now)?;
        let windows_closed = ing.closed.len();
        self.apply_windows(slot, st, ing.closed, true)?;
        Ok(SignalAck {
            seq: slot.stream.last_seq(),
            dedup_key: ing.dedup_key,
            duplicate: ing.duplicate,
            windows_closed,
        })
    }

    fn apply_advance(
        &self,
        slot: &Slot,
        st: &mut State,
        ts: DateTime<Utc>,
    ) -> Result<(), ServiceError> {
        self.sync_prompt_log(slot);
        let closed = st.perception.advance_to(ts)?;
        self.apply_windows(slot, st, closed, true)
    }

    fn apply_windows(
        &self,
        slot: &Slot,
        st: &mut State,
        windows: Vec<WindowOutcome>,
        decide: bool,
    ) -> Result<(), ServiceError> {
        for w in windows {
            let before = self.memory.working_snapshot(&slot.id)?.current_stage;
            self.memory
                .record_working(&slot.id, WorkingItem::Context(w.state.clone()))?;
            for e in &w.events {
                self.memory
                    .record_working(&slot.id, WorkingItem::Event(e.clone()))?;
            }
            let after = self.memory.working_snapshot(&slot.id)?.current_stage;
            for e in &w.events {
                self.emit(
                    slot,
                    None,
                    StreamKind::CriticalEvent,
                    e.ts,
                    serde_json::to_value(e)?,
                )?;
            }
            if after != before {
                self.emit(
                    slot,
                    None,
                    StreamKind::State,
                    w.state.window_end,
                    json!({
                        "event": "stage",
                        "from": before,
                        "to": after,
                        "window_index": w.state.window_index,
                    }),
                )?;
            }
            if decide && !w.events.is_empty() {
                self.decision_point(slot, st, &w)?;
            }
        }
        Ok(())
    }

    fn decision_point(
        &self,
        slot: &Slot,
        st: &mut State,
        w: &WindowOutcome,
    ) -> Result<(), ServiceError> {
        let ts = w.state.window_end;
        for rec_id in expire_recommendations(&mut st.recs, ts, self.reasoner.config().ttl()) {
            self.emit_status(slot, st, &rec_id, ts)?;
        }
        st.decisions += 1;
        let rec_id = format!("{}-rec-{:04}", slot.id, st.decisions);

        let adopted = slot
            .stream
            .peek_replay()
            .and_then(|r| persisted_decision(&r, &rec_id));
        let outcome = match adopted {
            Some(outcome) => {
                self.memory.record_working(
                    &slot.id,
                    WorkingItem::Precondition(PreconditionNote {
                        ts,
                        stage: outcome.precondition.meta.stage,
                        text: outcome.precondition.text.clone(),
                    }),
                )?;
                outcome
            }
            None => {
                self.sync_prompt_log(slot);
                self.reasoner
                    .decide(&w.events, ts, &rec_id, &st.recs, StatsMode::Apply)?
            }
        };
        self.emit(
            slot,
            None,
            StreamKind::State,
            ts,
            json!({ "event": "decision", "rec_id": rec_id, "outcome": outcome }),
        )?;
        if let Decision::Recommend(rec) = outcome.decision {
            st.recs.push(rec.clone());
            let body = serde_json::to_value(&rec)?;
            self.emit(
                slot,
                Some((&mut st.rec_log, &rec)),
                StreamKind::Recommendation,
                ts,
                body,
            )?;
        }
        Ok(())
    }

    fn apply_feedback(
        &self,
        slot: &Slot,
        st: &mut State,
        input: FeedbackInput,
    ) -> Result<FeedbackRecord, ServiceError> {
        for rec_id in expire_recommendations(&mut st.recs, input.ts, self.reasoner.config().ttl()) {
            self.emit_status(slot, st, &rec_id, input.ts)?;
        }
        // Counter updates were persisted with the original feedback.
        let stats = if slot.stream.replaying() {
            StatsMode::Skip
        } else {
            StatsMode::Apply
        };
        let out = self
            .reasoner
            .record_feedback(&slot.id, &input, &mut st.recs, stats)?;
        st.feedback.push(out.record.clone());
        st.accepted_feedback.push(input);
        self.emit(
            slot,
            None,
            StreamKind::FeedbackAck,
            out.record.ts,
            serde_json::to_value(&out.record)?,
        )?;
        if let Some((rec_id, _)) = &out.transition {
            self.emit_status(slot, st, rec_id, out.record.ts)?;
        }
        Ok(out.record)
    }

    fn apply_close(&self, slot: &Slot, st: &mut State) -> Result<CloseReport, ServiceError> {
        self.sync_prompt_log(slot);
        let last = st.perception.flush()?;
        let closed_at = last.state.window_end;
        self.apply_windows(slot, st, vec![last], false)?;
        self.memory.close_incident(&slot.id, closed_at)?;
        st.status = IncidentStatus::Closed;

        let case_id = format!("case-{}", slot.id);
        let case_id = if self.memory.episodic_snapshot().get(&case_id).is_some() {
            // Promoted before a restart.
            Some(case_id)
        } else {
            match self.memory.promote_to_episodic(&slot.id, &st.feedback) {
                Ok(case) => Some(case.case_id),
                Err(MemoryError::NothingToPromote(_)) => None,
                Err(e) => {
                    tracing::warn!(incident = %slot.id, error = %e, "promotion to episodic memory failed");
                    None
                }
            }
        };
        self.emit(
            slot,
            None,
            StreamKind::State,
            closed_at,
            json!({ "event": "closed", "case_id": case_id }),
        )?;
        self.memory.gateway().detach_log(&slot.id);
        Ok(CloseReport {
            seq: slot.stream.last_seq(),
            closed_at,
            case_id,
        })
    }

    // Recovery.

    fn recover(&self, dir: &Path) -> Result<(), ServiceError> {
        let meta: IncidentFile =
            serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
        validate_id(&meta.incident_id)?;
        for file in [INPUTS_FILE, RECS_FILE, PROMPTS_FILE] {
            repair_tail(&dir.join(file))?;
        }
        let inputs = read_inputs(&dir.join(INPUTS_FILE))?;
        let slot = self.build_slot(meta, false)?;
        {
            let mut st = slot.state.lock();
            self.sync_prompt_log(&slot);
            self.emit_opened(&slot, &st)?;
            for (n, input) in inputs.into_iter().enumerate() {
                let res = match input {
                    Input::Signal { now, signal } => {
                        self.apply_signal(&slot, &mut st, signal, now).map(|_| ())
                    }
                    Input::Advance { ts, .. } => self.apply_advance(&slot, &mut st, ts),
                    Input::Feedback { input, .. } => {
                        self.apply_feedback(&slot, &mut st, input).map(|_| ())
                    }
                    Input::Close { .. } => self.apply_close(&slot, &mut st).map(|_| ()),
                };
                // Inputs rejected when they first arrived are rejected again.
                if let Err(e) = res {
                    tracing::debug!(incident = %slot.id, input = n + 1, error = %e, "journaled input rejected on recovery");
                }
            }
            let left = slot.stream.finish_replay();
            if left > 0 {
                tracing::warn!(incident = %slot.id, records = left, "persisted records were not re-derived by recovery");
            }
            if st.status == IncidentStatus::Open {
                self.sync_prompt_log(&slot);
            }
        }
        self.slots.write().insert(slot.id.clone(), slot);
        Ok(())
    }

    // Queries.

    pub fn incident(&self, incident_id: &str) -> Result<IncidentHandle, ServiceError> {
        let slot = self.slot(incident_id)?;
        let st = slot.state.lock();
        Ok(self.handle_of(&slot, &st))
    }

    pub fn incidents(&self) -> Vec<IncidentHandle> {
        let slots: Vec<Arc<Slot>> = self.slots.read().values().cloned().collect();
        slots
            .iter()
            .map(|s| {
                let st = s.state.lock();
                self.handle_of(s, &st)
            })
            .collect()
    }

    pub fn stream(&self, incident_id: &str) -> Result<Arc<StreamLog>, ServiceError> {
        Ok(self.slot(incident_id)?.stream.clone())
    }

    pub fn records(
        &self,
        incident_id: &str,
        from_seq: u64,
    ) -> Result<Vec<StreamRecord>, ServiceError> {
        Ok(self.slot(incident_id)?.stream.from_seq(from_seq))
    }

    pub fn is_closed(&self, incident_id: &str) -> Result<bool, ServiceError> {
        Ok(self.slot(incident_id)?.state.lock().status == IncidentStatus::Closed)
    }

    pub fn recommendations(&self, incident_id: &str) -> Result<Vec<Recommendation>, ServiceError> {
        Ok(self.slot(incident_id)?.state.lock().recs.clone())
    }

    pub fn feedback(&self, incident_id: &str) -> Result<Vec<FeedbackRecord>, ServiceError> {
        Ok(self.slot(incident_id)?.state.lock().feedback.clone())
    }

    /// Prompt records logged by this process for the incident.
    pub fn prompt_records(
        &self,
        incident_id: &str,
    ) -> Result<Vec<crate::llm_gateway::PromptRecord>, ServiceError> {
        Ok(self.slot(incident_id)?.prompts.lock().records().to_vec())
    }

    // Memory administration.

    pub fn kca_list(&self, active_only: bool) -> Vec<KcaEntry> {
        self.memory
            .kca_snapshot()
            .entries()
            .iter()
            .filter(|e| !active_only || e.active)
            .cloned()
            .collect()
    }

    pub fn kca_get(&self, kca_id: &str) -> Result<KcaEntry, ServiceError> {
        self.memory
            .kca_get(kca_id)
            .ok_or_else(|| MemoryError::NotFound(kca_id.to_string()).into())
    }

    pub fn review(&self, op: ReviewOp, who: &str) -> Result<ReviewResult, ServiceError> {
        Ok(self.memory.expert_review(op, who, self.clock.now())?)
    }

    pub fn edit_kca(
        &self,
        kca_id: &str,
        patch: KcaPatch,
        who: &str,
    ) -> Result<KcaEntry, ServiceError> {
        match self.review(
            ReviewOp::Edit {
                kca_id: kca_id.to_string(),
                patch,
            },
            who,
        )? {
            ReviewResult::Entry(e) => Ok(e),
            ReviewResult::Listed(_) => unreachable!("edit returns the entry"),
        }
    }

    pub fn deactivate_kca(&self, kca_id: &str, who: &str) -> Result<KcaEntry, ServiceError> {
        match self.review(
            ReviewOp::Deactivate {
                kca_id: kca_id.to_string(),
            },
            who,
        )? {
            ReviewResult::Entry(e) => Ok(e),
            ReviewResult::Listed(_) => unreachable!("deactivate returns the entry"),
        }
    }

    pub fn distill_playbook(&self, doc: &PlaybookDoc) -> Result<ConsolidationReport, ServiceError> {
        Ok(self.memory.distill_playbook(doc, self.clock.now())?)
    }

    /// Distills every playbook in `dir`. Re-running is a no-op.
    pub fn load_playbooks(&self, dir: &Path) -> Result<ConsolidationReport, ServiceError> {
        let mut total = ConsolidationReport::default();
        for doc in PlaybookDoc::load_dir(dir)? {
            let r = self.distill_playbook(&doc)?;
            total.created.extend(r.created);
            total.merged.extend(r.merged);
        }
        Ok(total)
    }

    /// Distills every episodic case into long-term memory.
    pub fn consolidate(&self) -> Result<ConsolidationReport, ServiceError> {
        let cases = self.memory.episodic_snapshot();
        Ok(self
            .memory
            .consolidate_long_term(cases.cases(), self.clock.now())?)
    }

    pub fn episodic_cases(&self) -> Vec<EpisodicCase> {
        self.memory.episodic_snapshot().cases().to_vec()
    }
}

/// The decision persisted for `rec_id`, if that is the next record.
fn persisted_decision(r: &StreamRecord, rec_id: &str) -> Option<DecisionOutcome> {
    if r.kind != StreamKind::State
        || r.body.get("event").and_then(|e| e.as_str()) != Some("decision")
        || r.body.get("rec_id").and_then(|e| e.as_str()) != Some(rec_id)
    {
        return None;
    }
    serde_json::from_value(r.body.get("outcome")?.clone()).ok()
}

fn read_inputs(path: &Path) -> Result<Vec<Input>, ServiceError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Drops a partial final line left by a crash mid-write.
fn repair_tail(path: &Path) -> std::io::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    let f = OpenOptions::new().write(true).open(path)?;
    f.set_len(keep as u64)
}
