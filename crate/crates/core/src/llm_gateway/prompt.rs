//! Prompt section names and the line formats used inside sections.
//!
//! Builders in the pipeline modules and the offline provider share these so
//! the prompt stays a single, auditable interface.

use chrono::{DateTime, SecondsFormat, Utc};

pub const SYSTEM: &str = "System";
pub const SITUATION: &str = "Situation";
pub const RECENT_OBSERVATIONS: &str = "Recent Observations";
pub const RELEVANT_KNOWLEDGE: &str = "Relevant Knowledge";
pub const SIMILAR_PAST_OUTAGES: &str = "Similar Past Outages";
pub const TASK: &str = "Task";

pub const OUTAGE_STAGE: &str = "Outage Stage";
pub const OUTAGE_TITLE: &str = "Outage Title";
pub const CRITICAL_EVENTS: &str = "Critical Events";
pub const CURRENT_CONTEXT: &str = "Current Context";

pub const EVENT_KIND: &str = "Event Kind";
pub const CHANGE: &str = "Change";
pub const EVIDENCE: &str = "Evidence";

pub const PREVIOUS_SUMMARY: &str = "Previous Summary";
pub const WINDOW_OBSERVATIONS: &str = "Window Observations";
pub const OBSERVATION: &str = "Observation";

pub const DOCUMENT: &str = "Document";
pub const CASE: &str = "Case";
pub const PRECONDITION_HISTORY: &str = "Precondition History";
pub const SUCCESSFUL_ACTIONS: &str = "Successful Actions";

pub const TRACE: &str = "Trace";
pub const PREDICTION: &str = "Prediction";
pub const GROUND_TRUTH: &str = "Ground Truth";

/// Separator between list items that share one field.
pub const ITEM_SEP: &str = " ;; ";

pub fn fmt_ts(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Keeps free text from breaking the `|`-delimited line formats.
pub fn clean(text: &str) -> String {
    text.replace('|', "/")
        .replace(ITEM_SEP.trim(), ",")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// One long-term knowledge hit as listed under "Relevant Knowledge".
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeLine {
    pub id: String,
    pub score: f64,
    pub key: String,
    pub condition: String,
    pub action: String,
}

impl KnowledgeLine {
    pub fn render(&self) -> String {
        format!(
            "- [{}] score={:.4} | key: {} | condition: {} | action: {}",
            self.id,
            self.score,
            clean(&self.key),
            clean(&self.condition),
            clean(&self.action)
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let (id, score, fields) = parse_head(line)?;
        Some(Self {
            id,
            score,
            key: field(&fields, "key").unwrap_or_default(),
            condition: field(&fields, "condition").unwrap_or_default(),
            action: field(&fields, "action")?,
        })
    }
}

/// One episodic hit as listed under "Similar Past Outages".
#[derive(Debug, Clone, PartialEq)]
pub struct CaseLine {
    pub id: String,
    pub score: f64,
    pub outage: String,
    pub service: String,
    pub succeeded: Vec<String>,
    pub failed: Vec<String>,
}

impl CaseLine {
    pub fn render(&self) -> String {
        let join = |v: &[String]| {
            v.iter()
                .map(|s| clean(s))
                .collect::<Vec<_>>()
                .join(ITEM_SEP)
        };
        format!(
            "- [{}] score={:.4} | outage: {} | service: {} | succeeded: {} | failed: {}",
            self.id,
            self.score,
            clean(&self.outage),
            clean(&self.service),
            join(&self.succeeded),
            join(&self.failed)
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let (id, score, fields) = parse_head(line)?;
        let split = |s: Option<String>| -> Vec<String> {
            s.map(|s| {
                s.split(ITEM_SEP.trim())
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default()
        };
        Some(Self {
            id,
            score,
            outage: field(&fields, "outage").unwrap_or_default(),
            service: field(&fields, "service").unwrap_or_default(),
            succeeded: split(field(&fields, "succeeded")),
            failed: split(field(&fields, "failed")),
        })
    }
}

fn parse_head(line: &str) -> Option<(String, f64, Vec<String>)> {
    let rest = line.trim().strip_prefix("- [")?;
    let close = rest.find(']')?;
    let id = rest[..close].to_string();
    let mut parts = rest[close + 1..].split(" | ");
    let score = parts
        .next()?
        .trim()
        .strip_prefix("score=")?
        .parse::<f64>()
        .ok()?;
    Some((id, score, parts.map(str::to_string).collect()))
}

fn field(fields: &[String], name: &str) -> Option<String> {
    let prefix = format!("{name}:");
    fields
        .iter()
        .find_map(|f| f.trim().strip_prefix(&prefix).map(|v| v.trim().to_string()))
}

/// `key: value` lookup inside a section body.
pub fn kv(body: &str, key: &str) -> Option<String> {
    let prefix = format!("{key}:");
    body.lines()
        .find_map(|l| l.trim().strip_prefix(&prefix).map(|v| v.trim().to_string()))
        .filter(|v| !v.is_empty())
}

/// Parses a `Slot values: service=X; region=Y` line.
pub fn slot_values(body: &str) -> Vec<(String, String)> {
    kv(body, "Slot values")
        .map(|line| {
            line.split(';')
                .filter_map(|pair| {
                    let (k, v) = pair.split_once('=')?;
                    let (k, v) = (k.trim(), v.trim());
                    (!k.is_empty() && !v.is_empty()).then(|| (k.to_string(), v.to_string()))
                })
                .collect()
        })
        .unwrap_or_default()
}

/// Replaces `{slot}` markers for which a value is known.
pub fn fill_slots(template: &str, values: &[(String, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Splits a `a | b | c` line into trimmed fields.
pub fn pipe_fields(line: &str) -> Vec<&str> {
    line.split(" | ").map(str::trim).collect()
}

/// Body lines with a leading `- ` bullet removed.
pub fn bullets(body: &str) -> impl Iterator<Item = &str> {
    body.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.strip_prefix("- ").unwrap_or(l))
}
