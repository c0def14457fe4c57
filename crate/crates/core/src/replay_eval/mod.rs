//! Offline evaluation: synthetic traces, ground-truth construction, replay
//! through the live engine on a virtual clock, windowed semantic matching,
//! precision/recall reports and an embedding export for coverage plots.

mod corpus;
mod coverage;
mod ground_truth;
mod matching;
mod metrics;
mod replay;

pub use corpus::{generate_corpus, Corpus, GeneratedTrace, PROFILES};
pub use coverage::{
    export_embeddings, pca_2d, CoverageExport, CoverageHeader, CoverageKind, CoverageRow,
};
pub use ground_truth::{build_ground_truth, playbook_actions, GroundTruth, PlaybookAction};
pub use matching::{
    in_window, match_actions, match_with_scores, total_score, EvalItem, MatchPair, MatchResult,
};
pub use metrics::{
    compute_metrics, evaluate, Counts, EvalReport, Evaluation, SetReport, StageRow, TraceEval,
};
pub use replay::{replay, ReplayLog, ACTION_RESULT_ATTR};

use crate::domain::{Phase, Severity};
use crate::llm_gateway::GatewayError;
use crate::perception::RawSignal;
use crate::service::ServiceError;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("unknown corpus profile `{0}`")]
    UnknownProfile(String),

    #[error("inconsistent input: {0}")]
    InconsistentInput(String),

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("replay failed at trace position {position}: {source}")]
    Replay {
        position: usize,
        #[source]
        source: ServiceError,
    },

    #[error(transparent)]
    Service(#[from] ServiceError),

    #[error(transparent)]
    Gateway(#[from] GatewayError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Incident-level facts about a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub trace_id: String,
    pub incident_id: String,
    pub title: String,
    pub service: String,
    pub severity: Severity,
    pub started_at: DateTime<Utc>,
    #[serde(default)]
    pub profile: String,
    #[serde(default)]
    pub scenario: String,
}

/// One outage as a time-ordered signal list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub meta: TraceMeta,
    pub signals: Vec<RawSignal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_file: Option<PathBuf>,
}

impl Trace {
    /// Signals sorted by ts, all for this trace's incident.
    pub fn validate(&self) -> Result<(), EvalError> {
        if let Some(w) = self.signals.windows(2).find(|w| w[1].ts < w[0].ts) {
            return Err(EvalError::InvalidTrace(format!(
                "signals out of order at {}",
                w[1].ts
            )));
        }
        if let Some(s) = self
            .signals
            .iter()
            .find(|s| s.incident_id != self.meta.incident_id)
        {
            return Err(EvalError::InvalidTrace(format!(
                "signal at {} belongs to incident `{}`",
                s.ts, s.incident_id
            )));
        }
        Ok(())
    }

    /// Loads `<stem>.meta.json` and `<stem>.trace.jsonl`. `path` may name
    /// either file; a sibling `<stem>.labels.jsonl` is recorded when present.
    pub fn load(path: &Path) -> Result<Trace, EvalError> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let stem = name
            .strip_suffix(".trace.jsonl")
            .or_else(|| name.strip_suffix(".meta.json"))
            .ok_or_else(|| {
                EvalError::InvalidTrace(format!("{}: expected *.trace.jsonl", path.display()))
            })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let meta_path = dir.join(format!("{stem}.meta.json"));
        let meta: TraceMeta =
            serde_json::from_str(&read_text(&meta_path)?).map_err(|source| EvalError::Parse {
                path: meta_path.clone(),
                line: 1,
                source,
            })?;
        let signals = read_jsonl(&dir.join(format!("{stem}.trace.jsonl")))?;
        let labels = dir.join(format!("{stem}.labels.jsonl"));
        let trace = Trace {
            meta,
            signals,
            label_file: labels.is_file().then_some(labels),
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Writes the meta and signal files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        let id = &self.meta.trace_id;
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        write_text(&dir.join(format!("{id}.meta.json")), &meta)?;
        write_jsonl(&dir.join(format!("{id}.trace.jsonl")), &self.signals)
    }
}

/// Paths written for one generated trace.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTraceFiles {
    pub trace: PathBuf,
    pub labels: PathBuf,
}

/// Human confirmation of, or correction to, an extracted action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLine {
    pub ts: DateTime<Utc>,
    pub action_text: String,
    pub confirmed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub playbook_ref: Option<String>,
}

/// One action responders actually took, as found in a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthAction {
    pub gt_id: String,
    pub ts: DateTime<Utc>,
    pub action_text: String,
    pub stage: Phase,
    pub source_quote: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub playbook_ref: Option<String>,
    pub confirmed: bool,
}

pub(crate) fn read_text(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| EvalError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EvalError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&buf).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests;
