//! Precision and recall, overall and per stage.

use super::matching::{match_actions, EvalItem, MatchResult};
use super::EvalError;
use crate::config::{EvalConfig, MatchMode};
use crate::domain::Phase;
use crate::llm_gateway::Gateway;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: Phase,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub n_recs: usize,
    pub n_gts: usize,
    pub matched_recs: usize,
    pub matched_gts: usize,
}

/// Metrics against one ground-truth set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    /// `None` when there are no recommendations.
    pub precision: Option<f64>,
    /// `None` when there is no ground truth.
    pub recall: Option<f64>,
    pub n_recs: usize,
    pub n_gts: usize,
    pub matched_recs: usize,
    pub matched_gts: usize,
    pub per_stage: Vec<StageRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub n_traces: usize,
    pub n_observations: usize,
    pub n_events: usize,
    pub n_recs: usize,
    pub n_g1: usize,
    pub n_g2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub traces: Vec<String>,
    pub counts: Counts,
    pub g1: SetReport,
    pub g2: SetReport,
    pub config: EvalConfig,
    pub embedding_export_ref: Option<String>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Precision and recall for one match result.
///
/// A matched pair counts toward precision in the recommendation's stage and
/// toward recall in the ground-truth action's own stage, so per-stage recall
/// stays a fraction of that stage's ground truth. Both per-stage numerators
/// sum to the overall ones.
pub fn compute_metrics(
    m: &MatchResult,
    recs: &[EvalItem],
    gts: &[EvalItem],
) -> Result<SetReport, EvalError> {
    let rec_stage: HashMap<&str, Phase> = recs.iter().map(|r| (r.id.as_str(), r.stage)).collect();
    let gt_stage: HashMap<&str, Phase> = gts.iter().map(|g| (g.id.as_str(), g.stage)).collect();
    if rec_stage.len() != recs.len() || gt_stage.len() != gts.len() {
        return Err(EvalError::InconsistentInput(
            "duplicate ids in the inputs".into(),
        ));
    }
    let mut seen_recs = HashSet::new();
    let mut seen_gts = HashSet::new();
    for p in &m.pairs {
        if !rec_stage.contains_key(p.rec_id.as_str()) {
            return Err(EvalError::InconsistentInput(format!(
                "pair references unknown recommendation `{}`",
                p.rec_id
            )));
        }
        if !gt_stage.contains_key(p.gt_id.as_str()) {
            return Err(EvalError::InconsistentInput(format!(
                "pair references unknown ground truth `{}`",
                p.gt_id
            )));
        }
        if !seen_recs.insert(p.rec_id.as_str()) {
            return Err(EvalError::InconsistentInput(format!(
                "recommendation `{}` matched twice",
                p.rec_id
            )));
        }
        if !seen_gts.insert(p.gt_id.as_str()) && m.mode == MatchMode::OneToOne {
            return Err(EvalError::InconsistentInput(format!(
                "ground truth `{}` matched twice",
                p.gt_id
            )));
        }
    }
    let unmatched_ok = |list: &[String], known: &HashMap<&str, Phase>, matched: &HashSet<&str>| {
        let set: HashSet<&str> = list.iter().map(String::as_str).collect();
        set.len() == list.len()
            && set
                .iter()
                .all(|id| known.contains_key(id) && !matched.contains(id))
            && set.len() + matched.len() == known.len()
    };
    if !unmatched_ok(&m.unmatched_recs, &rec_stage, &seen_recs)
        || !unmatched_ok(&m.unmatched_gts, &gt_stage, &seen_gts)
    {
        return Err(EvalError::InconsistentInput(
            "matched and unmatched ids do not partition the inputs".into(),
        ));
    }

    let per_stage = Phase::ALL
        .iter()
        .map(|&stage| {
            let n_recs = recs.iter().filter(|r| r.stage == stage).count();
            let n_gts = gts.iter().filter(|g| g.stage == stage).count();
            let matched_recs = seen_recs
                .iter()
                .filter(|id| rec_stage[*id] == stage)
                .count();
            let matched_gts = seen_gts.iter().filter(|id| gt_stage[*id] == stage).count();
            StageRow {
                stage,
                precision: ratio(matched_recs, n_recs),
                recall: ratio(matched_gts, n_gts),
                n_recs,
                n_gts,
                matched_recs,
                matched_gts,
            }
        })
        .collect();
    Ok(SetReport {
        precision: ratio(seen_recs.len(), recs.len()),
        recall: ratio(seen_gts.len(), gts.len()),
        n_recs: recs.len(),
        n_gts: gts.len(),
        matched_recs: seen_recs.len(),
        matched_gts: seen_gts.len(),
        per_stage,
    })
}

/// Inputs for one trace. Items of different traces never match each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEval {
    pub trace_id: String,
    pub recs: Vec<EvalItem>,
    pub g1: Vec<EvalItem>,
    pub g2: Vec<EvalItem>,
    #[serde(default)]
    pub n_observations: usize,
    #[serde(default)]
    pub n_events: usize,
}

/// A report plus the match results it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub g1_matches: MatchResult,
    pub g2_matches: MatchResult,
}

fn merge(results: Vec<MatchResult>, cfg: &EvalConfig) -> MatchResult {
    let mut out = MatchResult {
        pairs: Vec::new(),
        unmatched_recs: Vec::new(),
        unmatched_gts: Vec::new(),
        window_s: cfg.window_s,
        threshold: cfg.threshold,
        symmetric_window: cfg.symmetric_window,
        mode: cfg.mode,
    };
    for r in results {
        out.pairs.extend(r.pairs);
        out.unmatched_recs.extend(r.unmatched_recs);
        out.unmatched_gts.extend(r.unmatched_gts);
    }
    out
}

/// Matches every trace and reduces to one micro-averaged report. Traces are
/// processed in trace-id order whatever the input order.
pub fn evaluate(
    traces: &[TraceEval],
    cfg: &EvalConfig,
    gateway: &Gateway,
) -> Result<Evaluation, EvalError> {
    let mut order: Vec<&TraceEval> = traces.iter().collect();
    order.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    let mut g1_results = Vec::new();
    let mut g2_results = Vec::new();
    let mut counts = Counts {
        n_traces: order.len(),
        ..Counts::default()
    };
    let (mut recs, mut g1, mut g2) = (Vec::new(), Vec::new(), Vec::new());
    for t in &order {
        g1_results.push(match_actions(&t.recs, &t.g1, cfg, gateway)?);
        g2_results.push(match_actions(&t.recs, &t.g2, cfg, gateway)?);
        counts.n_observations += t.n_observations;
        counts.n_events += t.n_events;
        recs.extend(t.recs.iter().cloned());
        g1.extend(t.g1.iter().cloned());
        g2.extend(t.g2.iter().cloned());
    }
    counts.n_recs = recs.len();
    counts.n_g1 = g1.len();
    counts.n_g2 = g2.len();
    let g1_matches = merge(g1_results, cfg);
    let g2_matches = merge(g2_results, cfg);
    let report = EvalReport {
        traces: order.iter().map(|t| t.trace_id.clone()).collect(),
        counts,
        g1: compute_metrics(&g1_matches, &recs, &g1)?,
        g2: compute_metrics(&g2_matches, &recs, &g2)?,
        config: cfg.clone(),
        embedding_export_ref: None,
    };
    Ok(Evaluation {
        report,
        g1_matches,
        g2_matches,
    })
}
