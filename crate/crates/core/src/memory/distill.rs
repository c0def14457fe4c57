//! Turning playbooks and closed cases into long-term knowledge.

use super::episodic::EpisodicCase;
use super::kca::{KcaDraft, KcaKey, KcaStore, MergeOutcome, Provenance};
use super::MemoryError;
use crate::domain::{Outcome, Phase};
use crate::llm_gateway::prompt::{self, fmt_ts};
use crate::llm_gateway::schema::{KcaCandidate, KcaListOut};
use crate::llm_gateway::{CompletionRequest, Gateway, SchemaHint};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SYSTEM_WHO: &str = "system:distill";
pub const CONSOLIDATE_WHO: &str = "system:consolidate";

const DISTILL_INSTRUCTION: &str = "Extract generalized key-condition-action triples. \
Use {service}, {region} and {role} slots for instance-specific names.";

/// One runbook or playbook. The id is the file stem when loaded from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaybookDoc {
    pub id: String,
    pub body: String,
}

impl PlaybookDoc {
    /// Reads every `.md` and `.txt` file in `dir`, sorted by id.
    pub fn load_dir(dir: &Path) -> Result<Vec<PlaybookDoc>, MemoryError> {
        let mut docs = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or_default();
            if !path.is_file() || !matches!(ext, "md" | "txt" | "markdown") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            docs.push(PlaybookDoc {
                id,
                body: std::fs::read_to_string(&path)?,
            });
        }
        docs.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(docs)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationReport {
    pub created: Vec<String>,
    pub merged: Vec<String>,
}

impl ConsolidationReport {
    fn absorb(&mut self, outcome: MergeOutcome) {
        match outcome {
            MergeOutcome::Created(id) => self.created.push(id),
            MergeOutcome::Merged(id) => {
                if !self.merged.contains(&id) {
                    self.merged.push(id)
                }
            }
        }
    }
}

fn candidate_draft(c: KcaCandidate, provenance: Provenance, source_ref: &str) -> Option<KcaDraft> {
    if c.condition.trim().is_empty() || c.action_template.trim().is_empty() {
        return None;
    }
    let stage = c
        .stage
        .parse::<Phase>()
        .ok()
        .or_else(|| Phase::infer(&c.condition))
        .unwrap_or(Phase::Mitigate);
    Some(KcaDraft::new(
        KcaKey {
            stage,
            service_domain: c.service_domain.trim().to_string(),
            scope: c.scope.trim().to_string(),
        },
        c.condition.trim(),
        c.action_template.trim(),
        provenance,
        source_ref,
    ))
}

/// Distills a playbook into entries with `playbook` provenance.
pub fn distill_playbook(
    store: &mut KcaStore,
    gw: &Gateway,
    doc: &PlaybookDoc,
    dedup_threshold: f64,
    now: DateTime<Utc>,
) -> Result<ConsolidationReport, MemoryError> {
    if doc.body.trim().is_empty() {
        return Err(MemoryError::EmptyDocument(doc.id.clone()));
    }
    let req = CompletionRequest::new(SchemaHint::KcaList)
        .section(prompt::SYSTEM, DISTILL_INSTRUCTION)
        .section(prompt::DOCUMENT, doc.body.as_str());
    let out: KcaListOut = gw.complete_as(&req)?;
    let mut report = ConsolidationReport::default();
    for c in out.entries {
        if let Some(draft) = candidate_draft(c, Provenance::Playbook, &doc.id) {
            report.absorb(store.merge_or_create(gw, draft, dedup_threshold, SYSTEM_WHO, now)?);
        }
    }
    Ok(report)
}

/// Prompt describing one closed case. `None` when nothing succeeded, since
/// failed actions never become knowledge.
pub fn case_request(case: &EpisodicCase) -> Option<CompletionRequest> {
    let successes: Vec<String> = case
        .actions
        .iter()
        .filter(|a| a.outcome == Outcome::Success)
        .map(|a| format!("- {} | {}", fmt_ts(a.ts), prompt::clean(&a.action_text)))
        .collect();
    if successes.is_empty() {
        return None;
    }
    let history: Vec<String> = case
        .precondition_history
        .iter()
        .map(|h| {
            format!(
                "- {} | {} | {}",
                fmt_ts(h.ts),
                h.stage,
                prompt::clean(&h.text)
            )
        })
        .collect();
    let mut req = CompletionRequest::new(SchemaHint::KcaList)
        .section(prompt::SYSTEM, DISTILL_INSTRUCTION)
        .section(
            prompt::CASE,
            format!(
                "Case: {}\nService: {}\nSeverity: {}\nTitle: {}",
                case.case_id,
                case.incident_meta.service,
                case.incident_meta.severity,
                prompt::clean(&case.incident_meta.title)
            ),
        );
    if !history.is_empty() {
        req = req.section(prompt::PRECONDITION_HISTORY, history.join("\n"));
    }
    Some(req.section(prompt::SUCCESSFUL_ACTIONS, successes.join("\n")))
}

/// Folds closed cases into long-term memory with `distilled` provenance.
pub fn consolidate_long_term(
    store: &mut KcaStore,
    gw: &Gateway,
    cases: &[EpisodicCase],
    dedup_threshold: f64,
    now: DateTime<Utc>,
) -> Result<ConsolidationReport, MemoryError> {
    if !(dedup_threshold > 0.0 && dedup_threshold < 1.0) {
        return Err(MemoryError::Invalid(format!(
            "dedup threshold {dedup_threshold} outside (0, 1)"
        )));
    }
    let mut report = ConsolidationReport::default();
    for case in cases {
        let Some(req) = case_request(case) else {
            continue;
        };
        let out: KcaListOut = gw.complete_as(&req)?;
        for c in out.entries {
            if let Some(draft) = candidate_draft(c, Provenance::Distilled, &case.case_id) {
                report.absorb(store.merge_or_create(
                    gw,
                    draft,
                    dedup_threshold,
                    CONSOLIDATE_WHO,
                    now,
                )?);
            }
        }
    }
    Ok(report)
}
