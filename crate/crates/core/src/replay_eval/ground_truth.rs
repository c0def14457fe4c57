//! Ground-truth construction: G1 is every action responders carried out, as
//! extracted from the trace and corrected by labels; G2 keeps the G1 actions
//! that an authoritative playbook also prescribes.

use super::{EvalError, GroundTruthAction, LabelLine, Trace};
use crate::domain::Phase;
use crate::llm_gateway::{
    cosine, prompt, schema::ActionListOut, CompletionRequest, Gateway, SchemaHint,
};
use crate::memory::{KcaEntry, Provenance};
use crate::perception::explicit_phase;
use crate::text::{canonicalize, strip_slots};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

/// Trace lines per extraction request.
const CHUNK_LINES: usize = 200;

const EXTRACT_INSTRUCTION: &str = "List every action that responders actually carried out. \
Skip proposals, questions and status chatter. Quote the source line verbatim.";

/// An action prescribed by a playbook, as distilled into long-term memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaybookAction {
    pub kca_id: String,
    pub doc_id: String,
    pub stage: Phase,
    /// Action template; `{service}` is filled per trace, other slots dropped.
    pub template: String,
}

/// Active playbook-provenance entries, in id order.
pub fn playbook_actions(entries: &[KcaEntry]) -> Vec<PlaybookAction> {
    let mut out: Vec<PlaybookAction> = entries
        .iter()
        .filter(|e| e.active && e.provenance == Provenance::Playbook)
        .map(|e| PlaybookAction {
            kca_id: e.kca_id.clone(),
            doc_id: e.source_ref.clone(),
            stage: e.key.stage,
            template: e.action_template.clone(),
        })
        .collect();
    out.sort_by(|a, b| a.kca_id.cmp(&b.kca_id));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub trace_id: String,
    pub g1: Vec<GroundTruthAction>,
    pub g2: Vec<GroundTruthAction>,
}

impl PlaybookAction {
    /// Action text for `service`.
    pub fn text_for(&self, service: &str) -> String {
        let filled = if service.trim().is_empty() {
            self.template.clone()
        } else {
            self.template.replace("{service}", service)
        };
        strip_slots(&filled)
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Incident stage at each signal: explicit transitions win, otherwise the
/// running maximum of inferred phases.
fn stage_timeline(trace: &Trace) -> Vec<(DateTime<Utc>, Phase)> {
    let mut phase = Phase::Detect;
    trace
        .signals
        .iter()
        .map(|s| {
            match explicit_phase(s) {
                Some((p, true)) => phase = p,
                Some((p, false)) => phase = phase.max(p),
                None => {
                    if let Some(p) = Phase::infer(&s.payload) {
                        phase = phase.max(p);
                    }
                }
            }
            (s.ts, phase)
        })
        .collect()
}

fn stage_at(timeline: &[(DateTime<Utc>, Phase)], ts: DateTime<Utc>) -> Phase {
    timeline
        .iter()
        .take_while(|(t, _)| *t <= ts)
        .last()
        .map_or(Phase::Detect, |(_, p)| *p)
}

/// The payload at `ts` that contains `quote`, ignoring case and spacing.
fn locate<'a>(trace: &'a Trace, ts: DateTime<Utc>, quote: &str) -> Option<&'a str> {
    let needle = canonicalize(quote);
    if needle.is_empty() {
        return None;
    }
    trace
        .signals
        .iter()
        .filter(|s| s.ts == ts)
        .map(|s| s.payload.as_str())
        .find(|p| canonicalize(p).contains(&needle))
}

fn extract(
    trace: &Trace,
    gateway: &Gateway,
) -> Result<Vec<(DateTime<Utc>, String, String)>, EvalError> {
    let lines: Vec<String> = trace
        .signals
        .iter()
        .map(|s| {
            format!(
                "{} | {} | {}",
                s.ts.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                prompt::clean(&s.source),
                prompt::clean(&s.payload)
            )
        })
        .collect();
    let mut found = Vec::new();
    for chunk in lines.chunks(CHUNK_LINES) {
        let req = CompletionRequest::new(SchemaHint::ActionList)
            .section(prompt::SYSTEM, EXTRACT_INSTRUCTION)
            .section(prompt::TRACE, chunk.join("\n"));
        let out: ActionListOut = gateway.complete_as(&req)?;
        for a in out.actions {
            let Ok(ts) = DateTime::parse_from_rfc3339(a.ts.trim()) else {
                tracing::debug!(ts = %a.ts, "extracted action has an unparsable timestamp");
                continue;
            };
            let ts = ts.with_timezone(&Utc);
            // An action whose quote is not in the trace is a hallucination.
            let Some(payload) = locate(trace, ts, &a.source_quote) else {
                tracing::debug!(quote = %a.source_quote, "extracted action does not quote the trace");
                continue;
            };
            let text = a.action_text.trim().to_string();
            if text.is_empty() {
                continue;
            }
            found.push((ts, text, payload.to_string()));
        }
    }
    Ok(found)
}

/// Builds G1 and G2 for one trace.
///
/// Labels win over extraction: a label with `confirmed = false` removes the
/// matching action, a confirmed label marks it confirmed (adding it when the
/// extractor missed it and the text is found in the trace at that ts), and a
/// label `playbook_ref` places the action in G2 directly. Other actions join
/// G2 when their text reaches `g2_threshold` cosine similarity to a
/// playbook action instantiated for the trace's service.
pub fn build_ground_truth(
    trace: &Trace,
    labels: &[LabelLine],
    playbooks: &[PlaybookAction],
    gateway: &Gateway,
    g2_threshold: f64,
) -> Result<GroundTruth, EvalError> {
    trace.validate()?;
    let timeline = stage_timeline(trace);
    let mut g1: Vec<GroundTruthAction> = Vec::new();
    for (ts, text, quote) in extract(trace, gateway)? {
        let key = canonicalize(&text);
        if g1
            .iter()
            .any(|g| g.ts == ts && canonicalize(&g.action_text) == key)
        {
            continue;
        }
        g1.push(GroundTruthAction {
            gt_id: String::new(),
            ts,
            action_text: text,
            stage: stage_at(&timeline, ts),
            source_quote: quote,
            playbook_ref: None,
            confirmed: false,
        });
    }

    for label in labels {
        let key = canonicalize(&label.action_text);
        let pos = g1
            .iter()
            .position(|g| g.ts == label.ts && canonicalize(&g.action_text) == key);
        match (pos, label.confirmed) {
            (Some(i), false) => {
                g1.remove(i);
            }
            (Some(i), true) => {
                g1[i].confirmed = true;
                if label.playbook_ref.is_some() {
                    g1[i].playbook_ref = label.playbook_ref.clone();
                }
            }
            (None, true) => match locate(trace, label.ts, &label.action_text) {
                Some(quote) => g1.push(GroundTruthAction {
                    gt_id: String::new(),
                    ts: label.ts,
                    action_text: label.action_text.trim().to_string(),
                    stage: stage_at(&timeline, label.ts),
                    source_quote: quote.to_string(),
                    playbook_ref: label.playbook_ref.clone(),
                    confirmed: true,
                }),
                None => tracing::warn!(
                    ts = %label.ts,
                    text = %label.action_text,
                    "label does not locate in the trace; skipped"
                ),
            },
            (None, false) => {}
        }
    }

    g1.sort_by(|a, b| {
        a.ts.cmp(&b.ts)
            .then_with(|| a.action_text.cmp(&b.action_text))
    });
    for (i, g) in g1.iter_mut().enumerate() {
        g.gt_id = format!("{}-gt-{:03}", trace.meta.trace_id, i + 1);
    }

    let pending: Vec<usize> = (0..g1.len())
        .filter(|&i| g1[i].playbook_ref.is_none())
        .collect();
    if !pending.is_empty() && !playbooks.is_empty() {
        let texts: Vec<String> = playbooks
            .iter()
            .map(|p| p.text_for(&trace.meta.service))
            .collect();
        let book_vecs = gateway.embed(&texts)?;
        let gt_texts: Vec<&str> = pending
            .iter()
            .map(|&i| g1[i].action_text.as_str())
            .collect();
        let gt_vecs = gateway.embed(&gt_texts)?;
        for (&i, v) in pending.iter().zip(&gt_vecs) {
            // First maximum wins, so ties go to the lowest kca id.
            let best = book_vecs
                .iter()
                .zip(playbooks)
                .map(|(b, p)| (cosine(&v.values, &b.values), p))
                .fold(None::<(f64, &PlaybookAction)>, |best, (s, p)| match best {
                    Some((bs, _)) if bs >= s => best,
                    _ => Some((s, p)),
                });
            if let Some((score, p)) = best.filter(|(s, _)| *s >= g2_threshold) {
                tracing::trace!(gt = %g1[i].gt_id, score, doc = %p.doc_id, "playbook-backed action");
                g1[i].playbook_ref = Some(p.doc_id.clone());
            }
        }
    }
    let g2 = g1
        .iter()
        .filter(|g| g.playbook_ref.is_some())
        .cloned()
        .collect();
    Ok(GroundTruth {
        trace_id: trace.meta.trace_id.clone(),
        g1,
        g2,
    })
}
