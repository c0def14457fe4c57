//! Library of closed outages.

use super::kca::write_atomic;
use super::working::WorkingMemoryState;
use super::MemoryError;
use crate::domain::{Outcome, Phase, Severity};
use crate::llm_gateway::{cosine, EmbeddingVector, Gateway};
use crate::reasoning::{Disposition, FeedbackRecord};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub service: String,
    pub severity: Severity,
    pub title: String,
    pub duration_s: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub ts: DateTime<Utc>,
    pub stage: Phase,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseAction {
    pub action_text: String,
    pub ts: DateTime<Utc>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicCase {
    pub case_id: String,
    pub incident_id: String,
    pub incident_meta: CaseMeta,
    /// Critical event ids in order of emission.
    pub event_sequence: Vec<String>,
    pub precondition_history: Vec<HistoryEntry>,
    pub actions: Vec<CaseAction>,
    pub closed_at: DateTime<Utc>,
    pub case_embedding: EmbeddingVector,
}

impl EpisodicCase {
    /// Text the case embedding is computed over.
    pub fn history_text(history: &[HistoryEntry]) -> String {
        history
            .iter()
            .map(|h| h.text.trim())
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn unknown_outcomes(&self) -> usize {
        self.actions
            .iter()
            .filter(|a| a.outcome == Outcome::Unknown)
            .count()
    }

    pub fn succeeded(&self) -> impl Iterator<Item = &CaseAction> {
        self.actions
            .iter()
            .filter(|a| a.outcome == Outcome::Success)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CaseAction> {
        self.actions
            .iter()
            .filter(|a| a.outcome == Outcome::Failure)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseFilter {
    pub service: Option<String>,
    pub severity: Option<Severity>,
}

/// Builds a case from the archived working memory of a closed incident.
///
/// Executed actions take their outcome from the matching feedback record,
/// else from what working memory recorded; dismissals are dropped.
pub fn build_case(
    wm: &WorkingMemoryState,
    feedback: &[FeedbackRecord],
    gw: &Gateway,
) -> Result<EpisodicCase, MemoryError> {
    let closed_at = wm
        .closed_at
        .ok_or_else(|| MemoryError::IncidentStillOpen(wm.incident_id.clone()))?;
    if wm.promoted {
        return Err(MemoryError::AlreadyPromoted(wm.incident_id.clone()));
    }
    if wm.event_log.is_empty() {
        return Err(MemoryError::NothingToPromote(wm.incident_id.clone()));
    }
    let mut history: Vec<HistoryEntry> = wm
        .preconditions
        .iter()
        .map(|p| HistoryEntry {
            ts: p.ts,
            stage: p.stage,
            text: p.text.clone(),
        })
        .collect();
    if history.is_empty() {
        history = wm
            .recent_events
            .iter()
            .map(|e| HistoryEntry {
                ts: e.event.ts,
                stage: e.event.phase,
                text: e.event.summary.clone(),
            })
            .collect();
    }
    let actions = wm
        .executed_actions()
        .map(|a| {
            let fb = feedback.iter().find(|f| {
                f.incident_id == wm.incident_id
                    && f.ts == a.ts
                    && f.human_action_text == a.action_text
                    && f.disposition != Disposition::Dismissed
            });
            CaseAction {
                action_text: a.action_text.clone(),
                ts: a.ts,
                outcome: fb.map_or(a.outcome, |f| f.result),
            }
        })
        .collect();
    let mut text = EpisodicCase::history_text(&history);
    if text.is_empty() {
        text = wm.meta.title.clone();
    }
    let case_embedding = gw.embed_one(&text)?;
    Ok(EpisodicCase {
        case_id: format!("case-{}", wm.incident_id),
        incident_id: wm.incident_id.clone(),
        incident_meta: CaseMeta {
            service: wm.meta.service.clone(),
            severity: wm.meta.severity,
            title: wm.meta.title.clone(),
            duration_s: (closed_at - wm.meta.opened_at).num_seconds().max(0),
        },
        event_sequence: wm.event_log.clone(),
        precondition_history: history,
        actions,
        closed_at,
        case_embedding,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EpisodicStore {
    cases: Vec<EpisodicCase>,
}

impl EpisodicStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn cases(&self) -> &[EpisodicCase] {
        &self.cases
    }

    pub fn get(&self, case_id: &str) -> Option<&EpisodicCase> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn insert(&mut self, case: EpisodicCase) -> Result<(), MemoryError> {
        if self.get(&case.case_id).is_some() {
            return Err(MemoryError::AlreadyPromoted(case.incident_id));
        }
        self.cases.push(case);
        self.cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        Ok(())
    }

    /// Hard-filtered cosine ranking, score descending, ties by case id.
    pub fn rank(&self, query: &[f64], m: usize, filter: &CaseFilter) -> Vec<(EpisodicCase, f64)> {
        let mut hits: Vec<(&EpisodicCase, f64)> = self
            .cases
            .iter()
            .filter(|c| {
                filter
                    .service
                    .as_deref()
                    .is_none_or(|s| c.incident_meta.service.eq_ignore_ascii_case(s))
                    && filter
                        .severity
                        .is_none_or(|s| c.incident_meta.severity == s)
            })
            .map(|c| (c, cosine(query, &c.case_embedding.values)))
            .collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| a.0.case_id.cmp(&b.0.case_id))
        });
        hits.into_iter()
            .take(m)
            .map(|(c, s)| (c.clone(), s))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let mut out = String::new();
        for c in &self.cases {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let mut store = Self::new();
        if !path.exists() {
            return Ok(store);
        }
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                store.cases.push(serde_json::from_str(&line)?);
            }
        }
        store.cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        Ok(store)
    }
}
