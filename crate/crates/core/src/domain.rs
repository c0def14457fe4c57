//! Vocabulary shared by every layer: outage life-cycle phases and severities.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Outage life-cycle stage. Declaration order is the precedence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Detect,
    Assess,
    Investigate,
    Mitigate,
    Resolve,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Detect,
        Phase::Assess,
        Phase::Investigate,
        Phase::Mitigate,
        Phase::Resolve,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Detect => "Detect",
            Phase::Assess => "Assess",
            Phase::Investigate => "Investigate",
            Phase::Mitigate => "Mitigate",
            Phase::Resolve => "Resolve",
        }
    }

    /// Highest-precedence phase whose cue phrases occur in `text`.
    pub fn infer(text: &str) -> Option<Phase> {
        let haystack = phrase_haystack(text);
        PHASE_CUES
            .iter()
            .rev()
            .find(|(_, cues)| cues.iter().any(|cue| phrase_in(&haystack, cue)))
            .map(|(phase, _)| *phase)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown phase: {0}")]
pub struct UnknownPhase(pub String);

impl FromStr for Phase {
    type Err = UnknownPhase;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "detect" | "detection" | "detected" => Ok(Phase::Detect),
            "assess" | "assessment" | "triage" => Ok(Phase::Assess),
            "investigate" | "investigation" | "diagnosis" | "diagnose" => Ok(Phase::Investigate),
            "mitigate" | "mitigation" => Ok(Phase::Mitigate),
            "resolve" | "resolution" | "recover" | "recovery" | "resolved" => Ok(Phase::Resolve),
            _ => Err(UnknownPhase(s.to_string())),
        }
    }
}

const PHASE_CUES: &[(Phase, &[&str])] = &[
    (
        Phase::Detect,
        &[
            "alert fired",
            "alert",
            "detected",
            "anomaly",
            "triggered shutdowns",
            "threshold exceeded",
            "outage declared",
        ],
    ),
    (
        Phase::Assess,
        &[
            "impact",
            "impacted",
            "blast radius",
            "customers affected",
            "assessing",
            "affected regions",
        ],
    ),
    (
        Phase::Investigate,
        &[
            "investigating",
            "investigation",
            "suspect",
            "suspected",
            "hypothesis",
            "root cause",
            "looking into",
            "diagnosing",
            "logs show",
        ],
    ),
    (
        Phase::Mitigate,
        &[
            "mitigation",
            "mitigating",
            "mitigated",
            "failover",
            "failing over",
            "failed over",
            "rollback",
            "rolling back",
            "rolled back",
            "engaging",
            "engaged",
            "restart",
            "restarting",
            "restarted",
            "throttle",
            "throttling",
            "throttled",
            "rerouting",
            "rerouted",
            "draining",
            "drained",
            "scaling out",
            "scaled out",
            "hotfix",
            "workaround",
        ],
    ),
    (
        Phase::Resolve,
        &[
            "restored",
            "recovered",
            "recovery sequence",
            "recovery initiated",
            "stabilizing",
            "stabilized",
            "resolved",
            "healthy again",
            "back to normal",
            "all clear",
            "validated",
        ],
    ),
];

/// Incident severity. `Sev1` is the most severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Severity {
    #[serde(rename = "SEV1")]
    Sev1,
    #[serde(rename = "SEV2")]
    Sev2,
    #[serde(rename = "SEV3")]
    Sev3,
    #[serde(rename = "SEV4")]
    Sev4,
    #[default]
    #[serde(rename = "unknown")]
    Unknown,
}

impl Severity {
    /// Higher is more severe; unknown ranks below every real severity.
    pub fn rank(self) -> u8 {
        match self {
            Severity::Sev1 => 4,
            Severity::Sev2 => 3,
            Severity::Sev3 => 2,
            Severity::Sev4 => 1,
            Severity::Unknown => 0,
        }
    }

    pub fn most_severe(self, other: Severity) -> Severity {
        if other.rank() > self.rank() {
            other
        } else {
            self
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Sev1 => "SEV1",
            Severity::Sev2 => "SEV2",
            Severity::Sev3 => "SEV3",
            Severity::Sev4 => "SEV4",
            Severity::Unknown => "unknown",
        }
    }

    /// Canonicalizes operator spellings ("SEV-1", "sev 2", "P1", "critical").
    pub fn canonicalize(raw: &str) -> Option<Severity> {
        let compact: String = raw
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect();
        match compact.as_str() {
            "sev1" | "s1" | "p1" | "sev0" | "critical" => Some(Severity::Sev1),
            "sev2" | "s2" | "p2" | "high" => Some(Severity::Sev2),
            "sev3" | "s3" | "p3" | "medium" | "moderate" => Some(Severity::Sev3),
            "sev4" | "s4" | "p4" | "low" => Some(Severity::Sev4),
            _ => None,
        }
    }

    /// Finds a severity marker such as "SEV-1" inside free text.
    pub fn infer(text: &str) -> Option<Severity> {
        let lower = text.to_ascii_lowercase();
        let bytes = lower.as_bytes();
        let mut best: Option<Severity> = None;
        let mut start = 0;
        while let Some(pos) = lower[start..].find("sev") {
            let idx = start + pos + 3;
            let mut j = idx;
            while j < bytes.len() && matches!(bytes[j], b'-' | b' ' | b'_') {
                j += 1;
            }
            if j < bytes.len() {
                let sev = match bytes[j] {
                    b'1' => Some(Severity::Sev1),
                    b'2' => Some(Severity::Sev2),
                    b'3' => Some(Severity::Sev3),
                    b'4' => Some(Severity::Sev4),
                    _ => None,
                };
                let boundary = bytes.get(j + 1).is_none_or(|b| !b.is_ascii_digit());
                let word_start =
                    start + pos == 0 || !bytes[start + pos - 1].is_ascii_alphanumeric();
                if let (Some(sev), true, true) = (sev, boundary, word_start) {
                    best = Some(best.map_or(sev, |b| b.most_severe(sev)));
                }
            }
            start = idx;
        }
        best
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lowercased text with punctuation turned into single spaces, padded so
/// that `phrase_in` can test word boundaries with a plain substring search.
pub fn phrase_haystack(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push(' ');
    let mut last_space = true;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    if !last_space {
        out.push(' ');
    }
    out
}

/// Whole-word phrase test against a haystack built by [`phrase_haystack`].
pub fn phrase_in(haystack: &str, phrase: &str) -> bool {
    let needle = phrase_haystack(phrase);
    !needle.trim().is_empty() && haystack.contains(&needle)
}

/// Result of an executed action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    #[default]
    Unknown,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
            Outcome::Unknown => "unknown",
        }
    }

    pub fn parse(raw: &str) -> Outcome {
        match raw.trim().to_ascii_lowercase().as_str() {
            "success" | "succeeded" | "ok" | "worked" => Outcome::Success,
            "failure" | "failed" | "fail" | "error" => Outcome::Failure,
            _ => Outcome::Unknown,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_precedence_order() {
        assert!(Phase::Detect < Phase::Assess);
        assert!(Phase::Mitigate < Phase::Resolve);
    }

    #[test]
    fn phase_inference_picks_highest() {
        assert_eq!(
            Phase::infer("thermal protection triggered shutdowns; cooling restored"),
            Some(Phase::Resolve)
        );
        assert_eq!(
            Phase::infer("Engaged facilities team to restore cooling"),
            Some(Phase::Mitigate)
        );
        assert_eq!(Phase::infer("can someone share the dashboard link"), None);
    }

    #[test]
    fn severity_canonicalization_table() {
        assert_eq!(Severity::canonicalize("SEV-1"), Some(Severity::Sev1));
        assert_eq!(Severity::canonicalize("sev 2"), Some(Severity::Sev2));
        assert_eq!(Severity::canonicalize("P3"), Some(Severity::Sev3));
        assert_eq!(Severity::canonicalize("low"), Some(Severity::Sev4));
        assert_eq!(Severity::canonicalize("whatever"), None);
    }

    #[test]
    fn severity_inference_from_text() {
        assert_eq!(
            Severity::infer("now under SEV-1, all hands"),
            Some(Severity::Sev1)
        );
        assert_eq!(Severity::infer("sev2 -> sev 3"), Some(Severity::Sev2));
        assert_eq!(Severity::infer("several nodes down"), None);
        assert_eq!(Severity::infer("sev12"), None);
    }

    #[test]
    fn sev1_is_most_severe() {
        assert_eq!(Severity::Sev2.most_severe(Severity::Sev1), Severity::Sev1);
        assert_eq!(Severity::Sev1.most_severe(Severity::Sev2), Severity::Sev1);
        assert_eq!(
            Severity::Unknown.most_severe(Severity::Sev4),
            Severity::Sev4
        );
    }

    #[test]
    fn phrases_respect_word_boundaries() {
        let hay = phrase_haystack("Alerting is noisy");
        assert!(!phrase_in(&hay, "alert"));
        assert!(phrase_in(&phrase_haystack("alert: cpu high"), "alert"));
    }
}
