//! Decision core: align critical events to a precondition, retrieve memory,
//! recommend one next action with a bounded refinement loop, and turn human
//! feedback into usage statistics.

mod types;

pub use types::*;

use crate::domain::Outcome;
use crate::llm_gateway::prompt::{self, CaseLine, KnowledgeLine};
use crate::llm_gateway::schema::{PreconditionOut, RecommendationOut};
use crate::llm_gateway::{CompletionRequest, Gateway, GatewayError, SchemaHint};
use crate::memory::{
    template_slots, CaseFilter, KcaQuery, Memory, MemoryError, PreconditionNote, RetrievalBundle,
    WorkingItem, WorkingMemoryState,
};
use crate::perception::{CriticalEvent, EntityKind};
use crate::text::strip_slots;
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Rationale prefix of recommendations that cite no memory.
pub const COLD_START: &str = "Cold start: no supporting knowledge or past outage was retrieved.";

const SYSTEM_PROMPT: &str = "You are an outage management assistant. You recommend the next \
best mitigation or recovery action for human responders. You never execute actions.";
const TASK_PROMPT: &str = "Recommend the next mitigation or recovery action. Cite the knowledge \
entries and past outages you rely on. If the retrieved context is insufficient, say what is missing.";
const ALIGN_PROMPT: &str = "Summarize the current outage situation as a generalized precondition.";

#[derive(Debug, thiserror::Error)]
pub enum ReasoningError {
    #[error("no critical events to align")]
    NoEvents,

    #[error("events belong to different incidents")]
    MixedIncidents,

    #[error("unknown incident `{0}`")]
    UnknownIncident(String),

    #[error("unknown recommendation `{0}`")]
    UnknownRecommendation(String),

    #[error("recommendation `{rec_id}` is {status}, not proposed")]
    NotOpen {
        rec_id: String,
        status: &'static str,
    },

    #[error("invalid feedback: {0}")]
    InvalidFeedback(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Memory(#[from] MemoryError),

    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasoningConfig {
    pub max_rounds: u32,
    pub min_confidence: f64,
    pub suppress_threshold: f64,
    pub match_threshold: f64,
    pub ttl_min: i64,
    /// Confidence removed per slot left as a placeholder.
    pub placeholder_penalty: f64,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            min_confidence: 0.4,
            suppress_threshold: 0.9,
            match_threshold: 0.75,
            ttl_min: 60,
            placeholder_penalty: 0.1,
        }
    }
}

impl ReasoningConfig {
    pub fn validate(&self) -> Result<(), ReasoningError> {
        if self.max_rounds == 0 {
            return Err(ReasoningError::Config(
                "max_rounds must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("min_confidence", self.min_confidence),
            ("suppress_threshold", self.suppress_threshold),
            ("match_threshold", self.match_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ReasoningError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.ttl_min <= 0 {
            return Err(ReasoningError::Config("ttl_min must be positive".into()));
        }
        Ok(())
    }

    pub fn ttl(&self) -> Duration {
        Duration::minutes(self.ttl_min)
    }
}

/// Whether usage counters are touched. Crash recovery re-runs decisions
/// whose effects on the counters were already persisted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsMode {
    Apply,
    Skip,
}

/// Human input before it is matched and classified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackInput {
    #[serde(default)]
    pub rec_id: Option<String>,
    pub ts: DateTime<Utc>,
    #[serde(default)]
    pub human_action_text: String,
    /// The responder declined the referenced recommendation.
    #[serde(default)]
    pub dismissed: bool,
    #[serde(default)]
    pub result: Outcome,
}

/// Result of recording feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub record: FeedbackRecord,
    /// Recommendation whose status changed, with its new status.
    pub transition: Option<(String, RecStatus)>,
}

/// One decision point end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionOutcome {
    pub precondition: Precondition,
    pub decision: Decision,
}

/// Slot values known for an incident, in a stable order.
pub fn slot_values(p: &Precondition, wm: &WorkingMemoryState) -> Vec<(String, String)> {
    let mut out = Vec::new();
    if !p.meta.affected_service.trim().is_empty() {
        out.push(("service".to_string(), p.meta.affected_service.clone()));
    }
    if let Some(ctx) = &wm.latest_context {
        for (slot, kind) in [
            ("region", EntityKind::Region),
            ("component", EntityKind::Component),
            ("role", EntityKind::Team),
            ("team", EntityKind::Team),
        ] {
            if let Some(e) = ctx.first_entity(kind) {
                out.push((slot.to_string(), e.canonical_name.clone()));
            }
        }
    }
    out
}

/// Fills known slots and renders the rest as `<slot>` placeholders.
/// Returns the text and the number of placeholders.
pub fn instantiate(template: &str, values: &[(String, String)]) -> (String, usize) {
    let filled = prompt::fill_slots(template, values);
    let missing = template_slots(&filled);
    let mut out = filled;
    for slot in &missing {
        out = out.replace(&format!("{{{slot}}}"), &format!("<{slot}>"));
    }
    (out, missing.len())
}

/// Reasoning over one shared memory.
pub struct Reasoner {
    memory: Arc<Memory>,
    cfg: ReasoningConfig,
}

impl std::fmt::Debug for Reasoner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reasoner")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

struct Candidate<'a> {
    template: &'a str,
    source: &'a str,
}

impl Reasoner {
    pub fn new(memory: Arc<Memory>, cfg: ReasoningConfig) -> Result<Self, ReasoningError> {
        cfg.validate()?;
        Ok(Self { memory, cfg })
    }

    pub fn config(&self) -> &ReasoningConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &Arc<Memory> {
        &self.memory
    }

    fn gateway(&self) -> &Gateway {
        self.memory.gateway()
    }

    /// Step 1: structured precondition from a batch of critical events.
    pub fn align_precondition(
        &self,
        events: &[CriticalEvent],
        wm: &WorkingMemoryState,
        ts: DateTime<Utc>,
        rec_id: Option<&str>,
    ) -> Result<Precondition, ReasoningError> {
        let first = events.first().ok_or(ReasoningError::NoEvents)?;
        if events.iter().any(|e| e.incident_id != first.incident_id) {
            return Err(ReasoningError::MixedIncidents);
        }
        let context = wm
            .latest_context
            .as_ref()
            .map(|c| c.summary.trim())
            .filter(|s| !s.is_empty())
            .unwrap_or("none");
        let listed = events
            .iter()
            .map(|e| format!("- [{}] {}", e.event_id, prompt::clean(&e.summary)))
            .collect::<Vec<_>>()
            .join("\n");
        let title = if wm.meta.title.trim().is_empty() {
            first.incident_id.as_str()
        } else {
            wm.meta.title.as_str()
        };
        let req = CompletionRequest::new(SchemaHint::Precondition)
            .section(prompt::SYSTEM, ALIGN_PROMPT)
            .section(prompt::OUTAGE_TITLE, title)
            .section(prompt::OUTAGE_STAGE, wm.current_stage.as_str())
            .section(prompt::CRITICAL_EVENTS, listed)
            .section(prompt::CURRENT_CONTEXT, context)
            .traced(&first.incident_id, ts, rec_id);
        let out: PreconditionOut = self.gateway().complete_as(&req)?;
        let text = out.precondition.trim();
        let text = if text.is_empty() {
            first.summary.trim()
        } else {
            text
        };
        let service = if wm.meta.service.trim().is_empty() {
            wm.latest_context
                .as_ref()
                .and_then(|c| c.first_entity(EntityKind::Service))
                .map(|e| e.canonical_name.clone())
                .unwrap_or_default()
        } else {
            wm.meta.service.clone()
        };
        let severity = wm.latest_context.as_ref().map_or(wm.meta.severity, |c| {
            c.severity.most_severe(wm.meta.severity)
        });
        Ok(Precondition {
            incident_id: first.incident_id.clone(),
            ts,
            text: text.to_string(),
            meta: PreconditionMeta {
                stage: wm.current_stage,
                affected_service: service,
                severity,
                outage_title: title.to_string(),
            },
            supporting_events: events.iter().map(|e| e.event_id.clone()).collect(),
        })
    }

    /// Step 2: top-k knowledge and top-m past outages for a precondition.
    pub fn retrieve_context(
        &self,
        p: &Precondition,
        k: usize,
        m: usize,
        filter_service: bool,
    ) -> Result<RetrievalBundle, ReasoningError> {
        if k == 0 || m == 0 {
            return Err(ReasoningError::Config("k and m must be at least 1".into()));
        }
        let key_text = format!("{} {}", p.meta.stage, p.meta.affected_service);
        let kca_hits = self.memory.retrieve_kca(
            &KcaQuery {
                key_text: Some(key_text.trim().to_string()),
                condition_text: Some(p.text.clone()),
            },
            k,
        )?;
        let service = p.meta.affected_service.trim();
        let filter = CaseFilter {
            service: (filter_service && !service.is_empty()).then(|| service.to_string()),
            severity: None,
        };
        let episodic_hits = self.memory.retrieve_episodic(&p.text, m, &filter)?;
        let working = self.memory.working_snapshot(&p.incident_id)?;
        Ok(RetrievalBundle {
            kca_hits,
            episodic_hits,
            working,
        })
    }

    /// Is `text` too close to something already tried or still pending?
    fn suppressed(&self, text: &str, avoid: &[String]) -> Result<bool, ReasoningError> {
        let probe = strip_slots(text);
        if probe.trim().is_empty() || avoid.is_empty() {
            return Ok(false);
        }
        let gw = self.gateway();
        let q = gw.embed_one(&probe)?;
        for a in avoid {
            let v = gw.embed_one(a)?;
            if q.cosine(&v) >= self.cfg.suppress_threshold {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn build_prompt(
        &self,
        p: &Precondition,
        bundle: &RetrievalBundle,
        knowledge: &[(Candidate<'_>, f64, String, String)],
        cases: &[CaseLine],
        slots: &[(String, String)],
        rec_id: &str,
    ) -> CompletionRequest {
        let mut situation = format!(
            "Outage: {}\nStage: {}\nService: {}\nSeverity: {}\nPrecondition: {}",
            prompt::clean(&p.meta.outage_title),
            p.meta.stage,
            prompt::clean(&p.meta.affected_service),
            p.meta.severity,
            prompt::clean(&p.text)
        );
        if !slots.is_empty() {
            let pairs: Vec<String> = slots.iter().map(|(k, v)| format!("{k}={v}")).collect();
            situation.push_str(&format!("\nSlot values: {}", pairs.join("; ")));
        }
        let mut recent: Vec<String> = bundle
            .working
            .timeline()
            .iter()
            .rev()
            .take(10)
            .map(|e| match e {
                crate::memory::TimelineEntry::Event { ts, summary, .. } => {
                    format!(
                        "- {} | event | {}",
                        prompt::fmt_ts(*ts),
                        prompt::clean(summary)
                    )
                }
                crate::memory::TimelineEntry::Action {
                    ts,
                    action_text,
                    result,
                    ..
                } => format!(
                    "- {} | action | {} ({})",
                    prompt::fmt_ts(*ts),
                    prompt::clean(action_text),
                    prompt::clean(result)
                ),
                crate::memory::TimelineEntry::Note { ts, text, .. } => {
                    format!("- {} | note | {}", prompt::fmt_ts(*ts), prompt::clean(text))
                }
            })
            .collect();
        recent.reverse();
        let knowledge_body: Vec<String> = knowledge
            .iter()
            .map(|(c, score, key, cond)| {
                KnowledgeLine {
                    id: c.source.to_string(),
                    score: *score,
                    key: key.clone(),
                    condition: cond.clone(),
                    action: c.template.to_string(),
                }
                .render()
            })
            .collect();
        let or_none = |v: Vec<String>| {
            if v.is_empty() {
                "none".to_string()
            } else {
                v.join("\n")
            }
        };
        CompletionRequest::new(SchemaHint::Recommendation)
            .section(prompt::SYSTEM, SYSTEM_PROMPT)
            .section(prompt::SITUATION, situation)
            .section(prompt::RECENT_OBSERVATIONS, or_none(recent))
            .section(prompt::RELEVANT_KNOWLEDGE, or_none(knowledge_body))
            .section(
                prompt::SIMILAR_PAST_OUTAGES,
                or_none(cases.iter().map(CaseLine::render).collect()),
            )
            .section(prompt::TASK, TASK_PROMPT)
            .traced(&p.incident_id, p.ts, Some(rec_id))
    }

    /// Step 3: the retrieve-reason-refine loop.
    ///
    /// `avoid` lists actions that must not be proposed again: those already
    /// attempted plus still-open recommendations. Each insufficient round
    /// doubles k and m and drops the service filter.
    pub fn recommend(
        &self,
        p: &Precondition,
        rec_id: &str,
        open_recs: &[Recommendation],
        stats: StatsMode,
    ) -> Result<Decision, ReasoningError> {
        let mut k = self.memory.config().k.max(1);
        let mut m = self.memory.config().m.max(1);
        let mut filter_service = true;
        let mut last_reason = String::from("no rounds run");
        for round in 1..=self.cfg.max_rounds {
            let bundle = self.retrieve_context(p, k, m, filter_service)?;
            let mut avoid: Vec<String> = bundle
                .working
                .attempted_actions
                .iter()
                .map(|a| a.action_text.clone())
                .collect();
            avoid.extend(
                open_recs
                    .iter()
                    .filter(|r| r.incident_id == p.incident_id && r.status == RecStatus::Proposed)
                    .map(|r| r.action_text.clone()),
            );
            let slots = slot_values(p, &bundle.working);

            let mut knowledge = Vec::new();
            for (entry, score) in &bundle.kca_hits {
                let (text, _) = instantiate(&entry.action_template, &slots);
                if self.suppressed(&text, &avoid)? {
                    continue;
                }
                knowledge.push((
                    Candidate {
                        template: entry.action_template.as_str(),
                        source: entry.kca_id.as_str(),
                    },
                    *score,
                    format!(
                        "{} / {} / {}",
                        entry.key.stage, entry.key.service_domain, entry.key.scope
                    ),
                    entry.condition.clone(),
                ));
            }
            let mut cases = Vec::new();
            for (case, score) in &bundle.episodic_hits {
                let mut succeeded = Vec::new();
                for a in case.succeeded() {
                    if !self.suppressed(&a.action_text, &avoid)? {
                        succeeded.push(a.action_text.clone());
                    }
                }
                cases.push(CaseLine {
                    id: case.case_id.clone(),
                    score: *score,
                    outage: case.incident_meta.title.clone(),
                    service: case.incident_meta.service.clone(),
                    succeeded,
                    failed: case.failed().map(|a| a.action_text.clone()).collect(),
                });
            }

            let req = self.build_prompt(p, &bundle, &knowledge, &cases, &slots, rec_id);
            let out: RecommendationOut = self.gateway().complete_as(&req)?;
            let verdict = match out {
                RecommendationOut::Insufficient { missing } => Err(missing),
                RecommendationOut::Recommend {
                    action,
                    confidence,
                    rationale,
                    supports,
                } => {
                    let (text, placeholders) = instantiate(&action, &slots);
                    let confidence = (confidence
                        - self.cfg.placeholder_penalty * placeholders as f64)
                        .clamp(0.0, 1.0);
                    if text.trim().is_empty() {
                        Err("the model returned an empty action".to_string())
                    } else if self.suppressed(&text, &avoid)? {
                        Err("the best candidate repeats an attempted or pending action".to_string())
                    } else if confidence < self.cfg.min_confidence {
                        Err(format!(
                            "confidence {confidence:.2} is below the minimum {:.2}",
                            self.cfg.min_confidence
                        ))
                    } else {
                        Ok((text, confidence, rationale, supports))
                    }
                }
            };
            match verdict {
                Ok((action_text, confidence, rationale, mut supports)) => {
                    supports
                        .kca_ids
                        .retain(|id| bundle.kca_hits.iter().any(|(e, _)| &e.kca_id == id));
                    supports
                        .case_ids
                        .retain(|id| bundle.episodic_hits.iter().any(|(c, _)| &c.case_id == id));
                    let rationale = if supports.kca_ids.is_empty() && supports.case_ids.is_empty() {
                        format!("{COLD_START} {rationale}")
                    } else {
                        rationale
                    };
                    if stats == StatsMode::Apply {
                        let hit_ids: Vec<String> = bundle
                            .kca_hits
                            .iter()
                            .map(|(e, _)| e.kca_id.clone())
                            .collect();
                        self.memory.note_retrieved(&hit_ids)?;
                        for id in &supports.kca_ids {
                            self.memory.note_recommended(id)?;
                        }
                    }
                    return Ok(Decision::Recommend(Recommendation {
                        rec_id: rec_id.to_string(),
                        incident_id: p.incident_id.clone(),
                        ts: p.ts,
                        action_text,
                        rationale,
                        supports,
                        confidence,
                        stage: p.meta.stage,
                        refinement_rounds_used: round,
                        status: RecStatus::Proposed,
                    }));
                }
                Err(reason) => {
                    last_reason = reason;
                    k *= 2;
                    m *= 2;
                    filter_service = false;
                }
            }
        }
        Ok(Decision::Abstain(Abstain {
            incident_id: p.incident_id.clone(),
            ts: p.ts,
            reason: last_reason,
            refinement_rounds_used: self.cfg.max_rounds,
        }))
    }

    /// Steps 1 to 3 for one batch of events. The precondition is written to
    /// working memory before retrieval.
    pub fn decide(
        &self,
        events: &[CriticalEvent],
        ts: DateTime<Utc>,
        rec_id: &str,
        open_recs: &[Recommendation],
        stats: StatsMode,
    ) -> Result<DecisionOutcome, ReasoningError> {
        let first = events.first().ok_or(ReasoningError::NoEvents)?;
        let wm = self.memory.working_snapshot(&first.incident_id)?;
        let precondition = self.align_precondition(events, &wm, ts, Some(rec_id))?;
        self.memory.record_working(
            &precondition.incident_id,
            WorkingItem::Precondition(PreconditionNote {
                ts,
                stage: precondition.meta.stage,
                text: precondition.text.clone(),
            }),
        )?;
        let decision = self.recommend(&precondition, rec_id, open_recs, stats)?;
        Ok(DecisionOutcome {
            precondition,
            decision,
        })
    }

    /// Classifies human input, updates the matched recommendation and the
    /// usage counters, and appends the action to working memory.
    pub fn record_feedback(
        &self,
        incident_id: &str,
        input: &FeedbackInput,
        recs: &mut [Recommendation],
        stats: StatsMode,
    ) -> Result<FeedbackOutcome, ReasoningError> {
        let wm = self
            .memory
            .working_snapshot(incident_id)
            .map_err(|_| ReasoningError::UnknownIncident(incident_id.to_string()))?;
        if wm.is_closed() {
            return Err(MemoryError::IncidentClosed(incident_id.to_string()).into());
        }
        let ttl = self.cfg.ttl();
        let is_open = |r: &Recommendation| {
            r.status == RecStatus::Proposed
                && input.ts - r.ts <= ttl
                && r.incident_id == incident_id
        };

        let gw = self.gateway();
        let (rec_idx, score) = match input.rec_id.as_deref() {
            Some(id) => {
                let idx = recs
                    .iter()
                    .position(|r| r.rec_id == id && r.incident_id == incident_id)
                    .ok_or_else(|| ReasoningError::UnknownRecommendation(id.to_string()))?;
                if !is_open(&recs[idx]) {
                    let status = if recs[idx].status == RecStatus::Proposed {
                        RecStatus::Expired
                    } else {
                        recs[idx].status
                    };
                    return Err(ReasoningError::NotOpen {
                        rec_id: id.to_string(),
                        status: status.as_str(),
                    });
                }
                let score = if input.human_action_text.trim().is_empty() {
                    1.0
                } else {
                    gw.similarity(&input.human_action_text, &recs[idx].action_text)?
                };
                (Some(idx), score)
            }
            None => {
                if input.human_action_text.trim().is_empty() {
                    return Err(ReasoningError::InvalidFeedback(
                        "feedback needs a rec_id or an action text".into(),
                    ));
                }
                let mut best: Option<(usize, f64)> = None;
                for (i, r) in recs.iter().enumerate().filter(|(_, r)| is_open(r)) {
                    let s = gw.similarity(&input.human_action_text, &r.action_text)?;
                    // Strictly greater keeps the earliest rec on ties.
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
                match best {
                    Some((i, s)) => (Some(i), s),
                    None => (None, 0.0),
                }
            }
        };

        let matched = rec_idx.filter(|_| score >= self.cfg.match_threshold);
        let (disposition, rec_idx) = if input.dismissed {
            let idx = rec_idx.ok_or_else(|| {
                ReasoningError::InvalidFeedback(
                    "a dismissal must reference an open recommendation".into(),
                )
            })?;
            if input.rec_id.is_none() && matched.is_none() {
                return Err(ReasoningError::InvalidFeedback(
                    "no open recommendation matches the dismissed action".into(),
                ));
            }
            (Disposition::Dismissed, Some(idx))
        } else if let Some(idx) = matched {
            (Disposition::ExecutedMatching, Some(idx))
        } else {
            (Disposition::ExecutedOther, None)
        };

        let mut transition = None;
        let mut rec_id = None;
        if let Some(idx) = rec_idx {
            let rec = &mut recs[idx];
            rec_id = Some(rec.rec_id.clone());
            let (status, primary) = match disposition {
                Disposition::Dismissed => {
                    (RecStatus::Dismissed, rec.supports.kca_ids.first().cloned())
                }
                _ => (RecStatus::Executed, rec.supports.kca_ids.first().cloned()),
            };
            rec.status = status;
            transition = Some((rec.rec_id.clone(), status));
            if let (Some(id), StatsMode::Apply) = (primary, stats) {
                match status {
                    RecStatus::Dismissed => self.memory.note_rejected(&id)?,
                    _ => self.memory.note_confirmed(&id)?,
                }
            }
        } else if disposition == Disposition::ExecutedOther {
            rec_id = input.rec_id.clone();
        }

        let action_text = if input.human_action_text.trim().is_empty() {
            rec_idx
                .map(|i| recs[i].action_text.clone())
                .unwrap_or_default()
        } else {
            input.human_action_text.trim().to_string()
        };
        let record = FeedbackRecord {
            rec_id,
            incident_id: incident_id.to_string(),
            ts: input.ts,
            human_action_text: action_text.clone(),
            disposition,
            result: if disposition == Disposition::Dismissed {
                Outcome::Unknown
            } else {
                input.result
            },
            match_score: score,
        };
        self.memory.record_working(
            incident_id,
            WorkingItem::Action {
                action_text,
                ts: input.ts,
                result: match disposition {
                    Disposition::Dismissed => "dismissed".to_string(),
                    _ => record.result.as_str().to_string(),
                },
                outcome: record.result,
                dismissed: disposition == Disposition::Dismissed,
                rec_id: record.rec_id.clone(),
            },
        )?;
        Ok(FeedbackOutcome { record, transition })
    }
}

/// Marks proposed recommendations older than `ttl` as expired. Idempotent.
pub fn expire_recommendations(
    recs: &mut [Recommendation],
    now: DateTime<Utc>,
    ttl: Duration,
) -> Vec<String> {
    let mut out = Vec::new();
    for r in recs.iter_mut() {
        if r.status == RecStatus::Proposed && now - r.ts > ttl {
            r.status = RecStatus::Expired;
            out.push(r.rec_id.clone());
        }
    }
    out
}
