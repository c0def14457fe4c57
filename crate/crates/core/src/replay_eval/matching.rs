//! Windowed semantic matching of recommendations to ground-truth actions.

use super::{EvalError, GroundTruthAction};
use crate::config::{EvalConfig, MatchMode};
use crate::domain::Phase;
use crate::llm_gateway::{
    cosine, prompt, schema::MatchVerdictOut, CompletionRequest, Gateway, SchemaHint,
};
use crate::reasoning::Recommendation;
use chrono::{DateTime, Utc};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Scores are scaled to integers for the exact assignment solver.
const SCORE_SCALE: f64 = 1e9;

/// A recommendation or ground-truth action reduced to what matching needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub ts: DateTime<Utc>,
    pub text: String,
    pub stage: Phase,
}

impl From<&Recommendation> for EvalItem {
    fn from(r: &Recommendation) -> Self {
        EvalItem {
            id: r.rec_id.clone(),
            ts: r.ts,
            text: r.action_text.clone(),
            stage: r.stage,
        }
    }
}

impl From<&GroundTruthAction> for EvalItem {
    fn from(g: &GroundTruthAction) -> Self {
        EvalItem {
            id: g.gt_id.clone(),
            ts: g.ts,
            text: g.action_text.clone(),
            stage: g.stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub rec_id: String,
    pub gt_id: String,
    pub score: f64,
    /// `gt.ts - rec.ts` in seconds.
    pub delta_t_s: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
    pub unmatched_recs: Vec<String>,
    pub unmatched_gts: Vec<String>,
    pub window_s: i64,
    pub threshold: f64,
    pub symmetric_window: bool,
    pub mode: MatchMode,
}

impl MatchResult {
    pub fn matched_recs(&self) -> HashSet<&str> {
        self.pairs.iter().map(|p| p.rec_id.as_str()).collect()
    }

    pub fn matched_gts(&self) -> HashSet<&str> {
        self.pairs.iter().map(|p| p.gt_id.as_str()).collect()
    }
}

/// Does `delta_t_s` (gt minus rec) fall inside the window?
pub fn in_window(delta_t_s: i64, window_s: i64, symmetric: bool) -> bool {
    if symmetric {
        delta_t_s.abs() <= window_s
    } else {
        (0..=window_s).contains(&delta_t_s)
    }
}

fn check(cfg: &EvalConfig, recs: &[EvalItem], gts: &[EvalItem]) -> Result<(), EvalError> {
    if cfg.window_s <= 0 {
        return Err(EvalError::InconsistentInput(
            "window_s must be positive".into(),
        ));
    }
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(EvalError::InconsistentInput(
            "threshold must lie in (0, 1)".into(),
        ));
    }
    for (what, items) in [("recommendation", recs), ("ground-truth", gts)] {
        let mut seen = HashSet::new();
        if let Some(dup) = items.iter().find(|i| !seen.insert(i.id.as_str())) {
            return Err(EvalError::InconsistentInput(format!(
                "duplicate {what} id `{}`",
                dup.id
            )));
        }
    }
    Ok(())
}

/// Indices of `items` in (ts, id) order, so results never depend on input order.
fn canonical_order(items: &[EvalItem]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| {
        items[a]
            .ts
            .cmp(&items[b].ts)
            .then_with(|| items[a].id.cmp(&items[b].id))
    });
    idx
}

/// Matches with the gateway: cosine similarity of embeddings, or the judge's
/// verdict when `cfg.judge` is set.
pub fn match_actions(
    recs: &[EvalItem],
    gts: &[EvalItem],
    cfg: &EvalConfig,
    gateway: &Gateway,
) -> Result<MatchResult, EvalError> {
    check(cfg, recs, gts)?;
    let mut scores = vec![vec![0.0; gts.len()]; recs.len()];
    if cfg.judge {
        for (i, r) in recs.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                if !in_window(
                    (g.ts - r.ts).num_seconds(),
                    cfg.window_s,
                    cfg.symmetric_window,
                ) {
                    continue;
                }
                let req = CompletionRequest::new(SchemaHint::MatchVerdict)
                    .section(prompt::PREDICTION, prompt::clean(&r.text))
                    .section(prompt::GROUND_TRUTH, prompt::clean(&g.text));
                let v: MatchVerdictOut = gateway.complete_as(&req)?;
                // A rejected pair never becomes a candidate, whatever its score.
                scores[i][j] = if v.is_match { v.score } else { 0.0 };
            }
        }
    } else {
        let texts: Vec<&str> = recs.iter().chain(gts).map(|i| i.text.as_str()).collect();
        let embedded: Vec<Option<Vec<f64>>> = texts
            .iter()
            .map(|t| {
                if t.trim().is_empty() {
                    Ok(None)
                } else {
                    gateway.embed_one(t).map(|v| Some(v.values))
                }
            })
            .collect::<Result<_, _>>()?;
        let (rv, gv) = embedded.split_at(recs.len());
        for (i, r) in rv.iter().enumerate() {
            for (j, g) in gv.iter().enumerate() {
                if let (Some(a), Some(b)) = (r, g) {
                    scores[i][j] = cosine(a, b);
                }
            }
        }
    }
    match_with_scores(recs, gts, &scores, cfg)
}

/// Matching over a precomputed `scores[rec][gt]` matrix.
///
/// Candidates satisfy the time window and reach the threshold. Greedy takes
/// candidates by descending score with ties broken by (rec ts, gt ts, rec id,
/// gt id); `cfg.optimal` solves the maximum-total-score assignment instead.
/// In many-to-one mode several recommendations may land on one ground-truth
/// action, so every recommendation takes its best candidate.
pub fn match_with_scores(
    recs: &[EvalItem],
    gts: &[EvalItem],
    scores: &[Vec<f64>],
    cfg: &EvalConfig,
) -> Result<MatchResult, EvalError> {
    check(cfg, recs, gts)?;
    if scores.len() != recs.len() || scores.iter().any(|row| row.len() != gts.len()) {
        return Err(EvalError::InconsistentInput(
            "score matrix does not fit the inputs".into(),
        ));
    }
    let ri = canonical_order(recs);
    let gi = canonical_order(gts);
    // Candidate (rec, gt) positions in canonical order, with score and delta.
    let mut cands: Vec<(usize, usize, f64, i64)> = Vec::new();
    for (a, &r) in ri.iter().enumerate() {
        for (b, &g) in gi.iter().enumerate() {
            let delta = (gts[g].ts - recs[r].ts).num_seconds();
            let s = scores[r][g];
            if s >= cfg.threshold && in_window(delta, cfg.window_s, cfg.symmetric_window) {
                cands.push((a, b, s, delta));
            }
        }
    }
    // Canonical positions order by (ts, id), so the last two keys break
    // ties between equal timestamps by id.
    cands.sort_by(|x, y| {
        y.2.total_cmp(&x.2)
            .then(recs[ri[x.0]].ts.cmp(&recs[ri[y.0]].ts))
            .then(gts[gi[x.1]].ts.cmp(&gts[gi[y.1]].ts))
            .then(x.0.cmp(&y.0))
            .then(x.1.cmp(&y.1))
    });

    let chosen: Vec<(usize, usize, f64, i64)> = match (cfg.mode, cfg.optimal) {
        (MatchMode::OneToOne, true) => optimal(&cands, ri.len(), gi.len()),
        (mode, _) => {
            let mut rec_used = vec![false; ri.len()];
            let mut gt_used = vec![false; gi.len()];
            let mut out = Vec::new();
            for &c in &cands {
                let gt_free = mode == MatchMode::ManyToOne || !gt_used[c.1];
                if !rec_used[c.0] && gt_free {
                    rec_used[c.0] = true;
                    gt_used[c.1] = true;
                    out.push(c);
                }
            }
            out
        }
    };

    let mut chosen = chosen;
    chosen.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.cmp(&y.1)));
    let rec_hit: HashSet<usize> = chosen.iter().map(|c| c.0).collect();
    let gt_hit: HashSet<usize> = chosen.iter().map(|c| c.1).collect();
    Ok(MatchResult {
        pairs: chosen
            .iter()
            .map(|&(a, b, score, delta)| MatchPair {
                rec_id: recs[ri[a]].id.clone(),
                gt_id: gts[gi[b]].id.clone(),
                score,
                delta_t_s: delta,
            })
            .collect(),
        unmatched_recs: (0..ri.len())
            .filter(|a| !rec_hit.contains(a))
            .map(|a| recs[ri[a]].id.clone())
            .collect(),
        unmatched_gts: (0..gi.len())
            .filter(|b| !gt_hit.contains(b))
            .map(|b| gts[gi[b]].id.clone())
            .collect(),
        window_s: cfg.window_s,
        threshold: cfg.threshold,
        symmetric_window: cfg.symmetric_window,
        mode: cfg.mode,
    })
}

/// Maximum-total-score one-to-one assignment over the candidates.
fn optimal(
    cands: &[(usize, usize, f64, i64)],
    n_recs: usize,
    n_gts: usize,
) -> Vec<(usize, usize, f64, i64)> {
    if cands.is_empty() {
        return Vec::new();
    }
    // The solver needs rows <= columns; put the shorter side on the rows.
    let transpose = n_recs > n_gts;
    let (rows, cols) = if transpose {
        (n_gts, n_recs)
    } else {
        (n_recs, n_gts)
    };
    let mut weights = Matrix::new(rows, cols, 0i64);
    for &(a, b, s, _) in cands {
        let (r, c) = if transpose { (b, a) } else { (a, b) };
        weights[(r, c)] = (s * SCORE_SCALE).round() as i64;
    }
    let (_, assign) = kuhn_munkres(&weights);
    let mut out = Vec::new();
    for (r, &c) in assign.iter().enumerate() {
        let (a, b) = if transpose { (c, r) } else { (r, c) };
        // Zero-weight assignments are padding, not matches.
        if let Some(&hit) = cands.iter().find(|x| x.0 == a && x.1 == b) {
            out.push(hit);
        }
    }
    out
}

/// Total score of a result, used to compare assignments.
pub fn total_score(m: &MatchResult) -> f64 {
    m.pairs.iter().map(|p| p.score).sum()
}
