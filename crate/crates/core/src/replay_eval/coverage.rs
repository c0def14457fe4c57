//! Embedding export for coverage plots: every predicted, ground-truth and
//! playbook action with its embedding and a 2-D principal-component
//! projection.

use super::{EvalError, EvalItem, PlaybookAction};
use crate::domain::Phase;
use crate::llm_gateway::Gateway;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const COVERAGE_FORMAT: &str = "outage-coverage";
pub const COVERAGE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageKind {
    Predicted,
    G1,
    Playbook,
}

/// First line of the export file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageHeader {
    pub format: String,
    pub version: u32,
    pub provider: String,
    pub dim: usize,
    pub projection: String,
    pub n_rows: usize,
    /// Variance captured by each of the two components.
    pub explained_variance: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub kind: CoverageKind,
    pub id: String,
    pub stage: Phase,
    pub text: String,
    pub embedding: Vec<f64>,
    pub xy: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageExport {
    pub header: CoverageHeader,
    pub rows: Vec<CoverageRow>,
}

impl CoverageExport {
    /// Header line, then one row per line.
    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        let mut buf = Vec::new();
        serde_json::to_writer(&mut buf, &self.header)?;
        buf.push(b'\n');
        for row in &self.rows {
            serde_json::to_writer(&mut buf, row)?;
            buf.push(b'\n');
        }
        let io = |source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::File::create(path)
            .map_err(io)?
            .write_all(&buf)
            .map_err(io)
    }
}

/// Projects rows onto their top two principal components.
///
/// Rows are centered and the components taken from a singular value
/// decomposition of the centered matrix, each signed so that its
/// largest-magnitude loading is positive. Returns the coordinates and the two
/// component variances. With fewer than two rows every point sits at the
/// origin.
pub fn pca_2d(rows: &[Vec<f64>]) -> (Vec<[f64; 2]>, [f64; 2]) {
    let n = rows.len();
    if n < 2 {
        return (vec![[0.0, 0.0]; n], [0.0, 0.0]);
    }
    let d = rows[0].len();
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    for mut r in x.row_iter_mut() {
        r -= &mean;
    }
    let mut coords = vec![[0.0, 0.0]; n];
    let mut variance = [0.0, 0.0];
    if x.iter().all(|v| *v == 0.0) {
        return (coords, variance);
    }
    let svd = x.clone().svd(false, true);
    let Some(vt) = svd.v_t else {
        return (coords, variance);
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    for (c, &k) in order.iter().take(2).enumerate() {
        let s = svd.singular_values[k];
        if s <= f64::EPSILON {
            continue;
        }
        let mut v = vt.row(k).transpose();
        let pivot = v
            .iter()
            .copied()
            .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if pivot < 0.0 {
            v = -v;
        }
        let proj = &x * v;
        for (i, p) in proj.iter().enumerate() {
            coords[i][c] = *p;
        }
        variance[c] = s * s / (n as f64 - 1.0);
    }
    (coords, variance)
}

/// Embeds every action and projects the set to 2-D. Rows come in the order
/// predicted, ground truth, playbook.
pub fn export_embeddings(
    recs: &[EvalItem],
    gts: &[EvalItem],
    playbooks: &[PlaybookAction],
    gateway: &Gateway,
) -> Result<CoverageExport, EvalError> {
    let mut rows: Vec<CoverageRow> = Vec::new();
    let book_texts: Vec<String> = playbooks.iter().map(|p| p.text_for("")).collect();
    let labelled = recs
        .iter()
        .map(|r| {
            (
                CoverageKind::Predicted,
                r.id.as_str(),
                r.stage,
                r.text.as_str(),
            )
        })
        .chain(
            gts.iter()
                .map(|g| (CoverageKind::G1, g.id.as_str(), g.stage, g.text.as_str())),
        )
        .chain(playbooks.iter().zip(&book_texts).map(|(p, t)| {
            (
                CoverageKind::Playbook,
                p.kca_id.as_str(),
                p.stage,
                t.as_str(),
            )
        }));
    for (kind, id, stage, text) in labelled {
        // Blank text has no embedding; such rows are skipped.
        if text.trim().is_empty() {
            continue;
        }
        rows.push(CoverageRow {
            kind,
            id: id.to_string(),
            stage,
            text: text.to_string(),
            embedding: gateway.embed_one(text)?.values,
            xy: [0.0, 0.0],
        });
    }
    let (xy, variance) = pca_2d(&rows.iter().map(|r| r.embedding.clone()).collect::<Vec<_>>());
    for (row, p) in rows.iter_mut().zip(xy) {
        row.xy = p;
    }
    Ok(CoverageExport {
        header: CoverageHeader {
            format: COVERAGE_FORMAT.into(),
            version: COVERAGE_VERSION,
            provider: gateway.provider_id().to_string(),
            dim: gateway.embedding_dim(),
            projection: "pca".into(),
            n_rows: rows.len(),
            explained_variance: variance,
        },
        rows,
    })
}
