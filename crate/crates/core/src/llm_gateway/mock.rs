//! Deterministic offline provider.
//!
//! Embeddings are signed feature-hashed bags of stemmed content tokens,
//! L2-normalized. Completions follow fixed extraction rules per schema so
//! that every output is a pure function of `(sections, schema, seed)`.

use super::prompt::{self, CaseLine, KnowledgeLine};
use super::schema::*;
use super::{CompletionRequest, EmbeddingVector, GatewayError, LlmProvider, Result, SchemaHint};
use crate::domain::{phrase_haystack, phrase_in, Phase};
use crate::text::{fnv1a64, strip_slots, tokens, truncate_chars};

pub const MOCK_EMBEDDING_DIM: usize = 256;

/// Minimum action similarity for a second hit to count as corroborating the
/// chosen one.
const CORROBORATION: f64 = 0.6;

/// Past-tense cues marking an utterance as an executed action.
const ACTION_CUES: &[&str] = &[
    "initiated",
    "executed",
    "performed",
    "applied",
    "started",
    "completed",
    "engaged",
    "rolled back",
    "failed over",
    "restarted",
    "scaled out",
    "drained",
    "rerouted",
    "paged",
    "declared",
    "throttled",
    "promoted",
    "opened",
    "posted",
    "disabled",
    "enabled",
    "raised",
];

/// Hedges that turn a cue into discussion rather than execution.
const HEDGES: &[&str] = &[
    "should we",
    "maybe",
    "might",
    "consider",
    "propose",
    "proposal",
    "plan to",
];

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut feats = tokens(text);
        if feats.is_empty() {
            feats = text
                .to_lowercase()
                .split_whitespace()
                .map(str::to_string)
                .collect();
        }
        if feats.is_empty() {
            feats.push(text.to_string());
        }
        let mut v = vec![0.0; self.dim];
        let seed = self.seed.to_le_bytes();
        for tok in &feats {
            let mut buf = Vec::with_capacity(8 + tok.len());
            buf.extend_from_slice(&seed);
            buf.extend_from_slice(tok.as_bytes());
            let h = fnv1a64(&buf);
            // fnv's low bits mix poorly for short inputs; fold the halves.
            let mixed = h ^ (h >> 29) ^ (h >> 47);
            let bucket = (mixed % self.dim as u64) as usize;
            let sign = if (h >> 40) & 1 == 1 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Every feature cancelled in one bucket; fall back to that bucket.
            let h = fnv1a64(text.as_bytes());
            v[(h % self.dim as u64) as usize] = 1.0;
            return v;
        }
        v.iter().map(|x| x / norm).collect()
    }

    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        super::cosine(&self.embed(a), &self.embed(b))
    }
}

/// Offline provider. Never touches the network.
#[derive(Debug, Clone)]
pub struct MockProvider {
    embedder: MockEmbedder,
}

impl MockProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            embedder: MockEmbedder::new(seed, dim),
        }
    }

    pub fn embedder(&self) -> &MockEmbedder {
        &self.embedder
    }

    fn precondition(&self, req: &CompletionRequest) -> PreconditionOut {
        let events = req
            .section_body(prompt::CRITICAL_EVENTS)
            .unwrap_or_default();
        let mut clauses: Vec<String> = Vec::new();
        for line in prompt::bullets(events) {
            let summary = line.split_once("] ").map_or(line, |(_, s)| s);
            let evidence = summary.split_once("Evidence: ").map_or(summary, |(_, e)| e);
            for clause in evidence.split("; ") {
                let clause = clause.trim().trim_end_matches('.').trim();
                if !clause.is_empty() && !clauses.iter().any(|c| c.eq_ignore_ascii_case(clause)) {
                    clauses.push(clause.to_string());
                }
            }
        }
        let mut text = clauses.join("; ");
        if text.is_empty() {
            text = req
                .section_body(prompt::CURRENT_CONTEXT)
                .filter(|s| !s.trim().is_empty())
                .unwrap_or("outage in progress")
                .to_string();
        }
        PreconditionOut {
            precondition: truncate_chars(&text, 400),
            stage: req
                .section_body(prompt::OUTAGE_STAGE)
                .map(|s| s.trim().to_string()),
        }
    }

    fn event_summary(&self, req: &CompletionRequest) -> SummaryOut {
        let kind = req
            .section_body(prompt::EVENT_KIND)
            .unwrap_or("other")
            .trim();
        let change = req.section_body(prompt::CHANGE).unwrap_or_default().trim();
        let evidence: Vec<&str> = req
            .section_body(prompt::EVIDENCE)
            .map(|b| prompt::bullets(b).take(3).collect())
            .unwrap_or_default();
        let mut summary = format!("{kind}: {change}");
        if !evidence.is_empty() {
            summary.push_str(". Evidence: ");
            summary.push_str(&evidence.join("; "));
        }
        SummaryOut {
            summary: truncate_chars(&summary, 400),
        }
    }

    fn window_summary(&self, req: &CompletionRequest) -> SummaryOut {
        let observed: Vec<&str> = req
            .section_body(prompt::WINDOW_OBSERVATIONS)
            .map(|b| prompt::bullets(b).collect())
            .unwrap_or_default();
        let mut recent: Vec<&str> = Vec::new();
        for line in observed.iter().rev() {
            if recent.len() == 3 {
                break;
            }
            if !recent.iter().any(|r| r.eq_ignore_ascii_case(line)) {
                recent.push(line);
            }
        }
        recent.reverse();
        let summary = if recent.is_empty() {
            req.section_body(prompt::PREVIOUS_SUMMARY)
                .unwrap_or_default()
                .trim()
                .to_string()
        } else {
            recent.join("; ")
        };
        SummaryOut {
            summary: truncate_chars(&summary, 400),
        }
    }

    fn recommendation(&self, req: &CompletionRequest) -> RecommendationOut {
        let situation = req.section_body(prompt::SITUATION).unwrap_or_default();
        let slots = prompt::slot_values(situation);
        let knowledge: Vec<KnowledgeLine> = req
            .section_body(prompt::RELEVANT_KNOWLEDGE)
            .map(|b| b.lines().filter_map(KnowledgeLine::parse).collect())
            .unwrap_or_default();
        let cases: Vec<CaseLine> = req
            .section_body(prompt::SIMILAR_PAST_OUTAGES)
            .map(|b| b.lines().filter_map(CaseLine::parse).collect())
            .unwrap_or_default();

        // First maximum wins; the caller lists hits in rank order.
        let best_kca = knowledge
            .iter()
            .fold(None::<&KnowledgeLine>, |best, k| match best {
                Some(b) if b.score >= k.score => Some(b),
                _ => Some(k),
            });
        let (action, confidence, mut supports, rationale) = if let Some(best) = best_kca {
            let rationale = format!(
                "Condition of knowledge entry {} best matches the situation (score {:.2}).",
                best.id, best.score
            );
            (
                best.action.clone(),
                best.score,
                SupportsOut {
                    kca_ids: vec![best.id.clone()],
                    case_ids: Vec::new(),
                },
                rationale,
            )
        } else {
            let best_case = cases.iter().filter(|c| !c.succeeded.is_empty()).fold(
                None::<&CaseLine>,
                |best, c| match best {
                    Some(b) if b.score >= c.score => Some(b),
                    _ => Some(c),
                },
            );
            let Some(case) = best_case else {
                return RecommendationOut::Insufficient {
                    missing: "no relevant knowledge or similar outages retrieved".into(),
                };
            };
            (
                case.succeeded[0].clone(),
                case.score * 0.9,
                SupportsOut {
                    kca_ids: Vec::new(),
                    case_ids: vec![case.id.clone()],
                },
                format!(
                    "Past outage {} with a similar precondition was resolved this way (score {:.2}).",
                    case.id, case.score
                ),
            )
        };

        let chosen = strip_slots(&action);
        for k in &knowledge {
            if !supports.kca_ids.contains(&k.id)
                && self.embedder.similarity(&strip_slots(&k.action), &chosen) >= CORROBORATION
            {
                supports.kca_ids.push(k.id.clone());
            }
        }
        for c in &cases {
            if !supports.case_ids.contains(&c.id)
                && c.succeeded
                    .iter()
                    .any(|a| self.embedder.similarity(a, &chosen) >= CORROBORATION)
            {
                supports.case_ids.push(c.id.clone());
            }
        }

        RecommendationOut::Recommend {
            action: prompt::fill_slots(&action, &slots),
            confidence: confidence.clamp(0.0, 1.0),
            rationale,
            supports,
        }
    }

    fn kca_list(&self, req: &CompletionRequest) -> KcaListOut {
        if let Some(doc) = req.section_body(prompt::DOCUMENT) {
            return KcaListOut {
                entries: distill_document(doc),
            };
        }
        let case = req.section_body(prompt::CASE).unwrap_or_default();
        let service = prompt::kv(case, "Service").unwrap_or_default();
        let title = prompt::kv(case, "Title").unwrap_or_default();
        let history: Vec<(String, String, String)> = req
            .section_body(prompt::PRECONDITION_HISTORY)
            .map(|b| {
                prompt::bullets(b)
                    .filter_map(|l| {
                        let f = prompt::pipe_fields(l);
                        (f.len() >= 3)
                            .then(|| (f[0].to_string(), f[1].to_string(), f[2..].join(" | ")))
                    })
                    .collect()
            })
            .unwrap_or_default();
        let actions: Vec<(String, String)> = req
            .section_body(prompt::SUCCESSFUL_ACTIONS)
            .map(|b| {
                prompt::bullets(b)
                    .filter_map(|l| {
                        let f = prompt::pipe_fields(l);
                        (f.len() >= 2).then(|| (f[0].to_string(), f[1..].join(" | ")))
                    })
                    .collect()
            })
            .unwrap_or_default();
        let entries = actions
            .into_iter()
            .map(|(ts, action)| {
                // RFC 3339 timestamps in one zone compare lexicographically.
                let pre = history
                    .iter()
                    .rev()
                    .find(|(hts, _, _)| hts.as_str() <= ts.as_str())
                    .or_else(|| history.first());
                let (stage, condition) = match pre {
                    Some((_, stage, text)) => (stage.clone(), text.clone()),
                    None => (
                        Phase::infer(&action).unwrap_or(Phase::Mitigate).to_string(),
                        title.clone(),
                    ),
                };
                KcaCandidate {
                    stage,
                    service_domain: service.clone(),
                    scope: String::new(),
                    condition,
                    action_template: templatize(&action, &service),
                }
            })
            .collect();
        KcaListOut { entries }
    }

    fn action_list(&self, req: &CompletionRequest) -> ActionListOut {
        let body = req.section_body(prompt::TRACE).unwrap_or_default();
        let actions = body
            .lines()
            .filter_map(|line| {
                let f = prompt::pipe_fields(line);
                if f.len() < 3 {
                    return None;
                }
                let payload = f[2..].join(" | ");
                is_action_utterance(&payload).then(|| ExtractedAction {
                    ts: f[0].to_string(),
                    action_text: payload.trim().to_string(),
                    source_quote: payload.clone(),
                })
            })
            .collect();
        ActionListOut { actions }
    }

    fn match_verdict(&self, req: &CompletionRequest) -> MatchVerdictOut {
        let a = req.section_body(prompt::PREDICTION).unwrap_or_default();
        let b = req.section_body(prompt::GROUND_TRUTH).unwrap_or_default();
        let score = if a.trim().is_empty() || b.trim().is_empty() {
            0.0
        } else {
            self.embedder.similarity(a, b)
        };
        MatchVerdictOut {
            is_match: score >= 0.75,
            score,
        }
    }
}

/// Does this utterance report an action that was carried out?
pub(crate) fn is_action_utterance(payload: &str) -> bool {
    let hay = phrase_haystack(payload);
    if payload.contains('?') || HEDGES.iter().any(|h| phrase_in(&hay, h)) {
        return false;
    }
    ACTION_CUES.iter().any(|cue| phrase_in(&hay, cue))
}

/// Replaces literal mentions of the service with a `{service}` slot.
fn templatize(action: &str, service: &str) -> String {
    if service.is_empty() {
        return action.to_string();
    }
    let lower = action.to_lowercase();
    let needle = service.to_lowercase();
    match lower.find(&needle) {
        Some(pos) if lower.is_char_boundary(pos) => {
            format!(
                "{}{{service}}{}",
                &action[..pos],
                &action[pos + needle.len()..]
            )
        }
        _ => action.to_string(),
    }
}

/// Runbook extraction rule: `## <Phase>` headings set the stage, `Domain:` and
/// `Scope:` lines set the key, and every sentence shaped
/// `When|If|After|Once <condition>, <action>.` yields one triple.
fn distill_document(doc: &str) -> Vec<KcaCandidate> {
    let mut stage: Option<Phase> = None;
    let mut domain = String::new();
    let mut scope = String::new();
    let mut out = Vec::new();
    for raw in doc.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix("## ") {
            stage = h.trim().parse().ok();
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if let Some(d) = line.strip_prefix("Domain:") {
            domain = d.trim().to_string();
            continue;
        }
        if let Some(s) = line.strip_prefix("Scope:") {
            scope = s.trim().to_string();
            continue;
        }
        let line = line.strip_prefix("- ").unwrap_or(line);
        for sentence in line.split(". ") {
            let sentence = sentence.trim().trim_end_matches('.');
            let lower = sentence.to_lowercase();
            let Some(lead) = ["when ", "if ", "after ", "once "]
                .iter()
                .find(|w| lower.starts_with(*w))
            else {
                continue;
            };
            let Some((cond, action)) = sentence[lead.len()..].split_once(", ") else {
                continue;
            };
            let action = action.trim();
            let action = action.strip_prefix("then ").unwrap_or(action).trim();
            if cond.trim().is_empty() || action.is_empty() {
                continue;
            }
            let mut chars = action.chars();
            let action = match chars.next() {
                Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
                None => continue,
            };
            let phase = stage
                .or_else(|| Phase::infer(&format!("{cond} {action}")))
                .unwrap_or(Phase::Mitigate);
            out.push(KcaCandidate {
                stage: phase.to_string(),
                service_domain: domain.clone(),
                scope: scope.clone(),
                condition: cond.trim().to_string(),
                action_template: action,
            });
        }
    }
    out
}

impl LlmProvider for MockProvider {
    fn provider_id(&self) -> &str {
        "mock"
    }

    fn embedding_dim(&self) -> usize {
        self.embedder.dim
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        let schema = req.schema_hint.ok_or_else(|| {
            GatewayError::InvalidRequest("mock provider needs a schema_hint".into())
        })?;
        let json = match schema {
            SchemaHint::Precondition => serde_json::to_string(&self.precondition(req)),
            SchemaHint::Recommendation => serde_json::to_string(&self.recommendation(req)),
            SchemaHint::KcaList => serde_json::to_string(&self.kca_list(req)),
            SchemaHint::ActionList => serde_json::to_string(&self.action_list(req)),
            SchemaHint::Summary => serde_json::to_string(&self.window_summary(req)),
            SchemaHint::EventSummary => serde_json::to_string(&self.event_summary(req)),
            SchemaHint::EventType => serde_json::to_string(&EventTypeOut {
                event_type: "status_update".into(),
            }),
            SchemaHint::MatchVerdict => serde_json::to_string(&self.match_verdict(req)),
        };
        json.map_err(|e| GatewayError::SchemaViolation {
            schema: schema.as_str().into(),
            detail: e.to_string(),
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    Err(GatewayError::EmptyText)
                } else {
                    Ok(EmbeddingVector::new(self.embedder.embed(t), "mock"))
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_gateway::{cosine, Gateway};

    #[test]
    fn completion_is_deterministic() {
        let gw = Gateway::mock(7);
        let req = CompletionRequest::new(SchemaHint::Precondition)
            .section(prompt::SITUATION, "primary db down")
            .section(
                prompt::CRITICAL_EVENTS,
                "- [t] severity_change: primary db down",
            );
        let a = gw.complete(&req).unwrap();
        let b = gw.complete(&req).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn identical_texts_embed_identically() {
        let gw = Gateway::mock(3);
        let v = gw.embed(&["a b c", "a b c"]).unwrap();
        assert_eq!(v[0], v[1]);
        assert!((cosine(&v[0].values, &v[1].values) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_norm_at_default_dim() {
        let gw = Gateway::mock(0);
        let v = gw.embed_one("x").unwrap();
        assert_eq!(v.dim, 256);
        assert_eq!(v.values.len(), 256);
        assert!((v.norm() - 1.0).abs() < 1e-9);
        // Stopword-only input still gets a non-zero vector.
        assert!((gw.embed_one("the").unwrap().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shared_tokens_beat_disjoint_tokens_across_seeds() {
        for seed in 0..10 {
            let e = MockEmbedder::new(seed, MOCK_EMBEDDING_DIM);
            let near = e.similarity("thermal shutdown storage", "thermal shutdown cooling");
            let far = e.similarity("thermal shutdown storage", "login page latency");
            assert!(near > far, "seed {seed}: {near} <= {far}");
        }
    }

    #[test]
    fn recommendation_echoes_single_template_with_slots() {
        let knowledge = KnowledgeLine {
            id: "kca-000001".into(),
            score: 0.8,
            key: "Resolve / storage / ".into(),
            condition: "cooling restored".into(),
            action: "Initiate controlled power-up and recovery sequence for {service}".into(),
        };
        let req = CompletionRequest::new(SchemaHint::Recommendation)
            .section(prompt::SYSTEM, "You recommend outage mitigation actions.")
            .section(
                prompt::SITUATION,
                "Precondition: cooling restored\nSlot values: service=DirectDrive",
            )
            .section(prompt::RECENT_OBSERVATIONS, "none")
            .section(prompt::RELEVANT_KNOWLEDGE, knowledge.render())
            .section(prompt::SIMILAR_PAST_OUTAGES, "none")
            .section(
                prompt::TASK,
                "Recommend the next mitigation or recovery action.",
            );
        let out: RecommendationOut = Gateway::mock(7).complete_as(&req).unwrap();
        match out {
            RecommendationOut::Recommend {
                action,
                confidence,
                supports,
                ..
            } => {
                assert_eq!(
                    action,
                    "Initiate controlled power-up and recovery sequence for DirectDrive"
                );
                assert!((confidence - 0.8).abs() < 1e-12);
                assert_eq!(supports.kca_ids, vec!["kca-000001".to_string()]);
            }
            other => panic!("expected recommendation, got {other:?}"),
        }
    }

    #[test]
    fn recommendation_without_context_is_insufficient() {
        let req = CompletionRequest::new(SchemaHint::Recommendation)
            .section(prompt::SITUATION, "Precondition: something")
            .section(prompt::RELEVANT_KNOWLEDGE, "none");
        let out: RecommendationOut = Gateway::mock(7).complete_as(&req).unwrap();
        assert!(matches!(out, RecommendationOut::Insufficient { .. }));
    }

    #[test]
    fn runbook_rule_extracts_triples() {
        let doc = "# Thermal runbook\nDomain: storage\n## Resolve\nWhen cooling is restored and temperatures are stabilizing, initiate controlled power-up and recovery sequence for {service}.\nNotes without a condition are skipped.";
        let entries = distill_document(doc);
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].stage, "Resolve");
        assert_eq!(entries[0].service_domain, "storage");
        assert_eq!(
            entries[0].action_template,
            "Initiate controlled power-up and recovery sequence for {service}"
        );
        assert_eq!(
            entries[0].condition,
            "cooling is restored and temperatures are stabilizing"
        );
    }

    #[test]
    fn action_cues_and_hedges() {
        assert!(is_action_utterance("Controlled, staged recovery initiated"));
        assert!(is_action_utterance("completed recovery sequencing plans"));
        assert!(!is_action_utterance("should we restart the nodes?"));
        assert!(!is_action_utterance("we might have restarted too early"));
        assert!(!is_action_utterance("can someone share the dashboard link"));
    }

    #[test]
    fn templatize_replaces_service_mention() {
        assert_eq!(
            templatize("Failed over DirectDrive to secondary", "DirectDrive"),
            "Failed over {service} to secondary"
        );
        assert_eq!(templatize("Restart nodes", ""), "Restart nodes");
    }
}
