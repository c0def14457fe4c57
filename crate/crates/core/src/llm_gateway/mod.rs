//! Single boundary for generative completions and text embeddings.
//!
//! Every other module talks to language models through [`Gateway`]. The
//! offline [`MockProvider`] makes each call a pure function of its inputs and
//! a seed, so the whole pipeline can be replayed byte-for-byte without a
//! network; [`ExternalProvider`] speaks an OpenAI-compatible HTTP API behind
//! an on-disk response cache.

mod external;
mod mock;
pub mod prompt;
mod prompt_log;
pub mod schema;

pub use external::{ExternalProvider, API_KEY_ENV};
pub use mock::{MockEmbedder, MockProvider, MOCK_EMBEDDING_DIM};
pub use prompt_log::{PromptLog, PromptRecord};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::Arc;

/// Errors raised at the model boundary.
#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("invalid provider config: {0}")]
    InvalidConfig(String),

    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("output for schema `{schema}` failed to parse after retry: {detail}")]
    SchemaViolation { schema: String, detail: String },

    #[error("embedding input is empty")]
    EmptyText,

    #[error("cache io: {0}")]
    Cache(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GatewayError>;

/// Expected structured output of a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaHint {
    Precondition,
    Recommendation,
    KcaList,
    ActionList,
    Summary,
    EventSummary,
    EventType,
    MatchVerdict,
}

impl SchemaHint {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemaHint::Precondition => "precondition",
            SchemaHint::Recommendation => "recommendation",
            SchemaHint::KcaList => "kca_list",
            SchemaHint::ActionList => "action_list",
            SchemaHint::Summary => "summary",
            SchemaHint::EventSummary => "event_summary",
            SchemaHint::EventType => "event_type",
            SchemaHint::MatchVerdict => "match_verdict",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSection {
    pub name: String,
    pub body: String,
}

/// Where a completion belongs, for the per-incident prompt log. Not part of
/// the prompt itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTrace {
    pub incident_id: String,
    pub ts: DateTime<Utc>,
    pub rec_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt_sections: Vec<PromptSection>,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub schema_hint: Option<SchemaHint>,
    pub trace: Option<PromptTrace>,
}

impl CompletionRequest {
    pub fn new(schema_hint: SchemaHint) -> Self {
        Self {
            prompt_sections: Vec::new(),
            max_output_tokens: 512,
            temperature: 0.0,
            schema_hint: Some(schema_hint),
            trace: None,
        }
    }

    pub fn section(mut self, name: impl Into<String>, body: impl Into<String>) -> Self {
        self.prompt_sections.push(PromptSection {
            name: name.into(),
            body: body.into(),
        });
        self
    }

    pub fn traced(mut self, incident_id: &str, ts: DateTime<Utc>, rec_id: Option<&str>) -> Self {
        self.trace = Some(PromptTrace {
            incident_id: incident_id.to_string(),
            ts,
            rec_id: rec_id.map(str::to_string),
        });
        self
    }

    pub fn section_body(&self, name: &str) -> Option<&str> {
        self.prompt_sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.body.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_sections.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "prompt_sections is empty".into(),
            ));
        }
        let mut seen = HashSet::new();
        for s in &self.prompt_sections {
            if !seen.insert(s.name.as_str()) {
                return Err(GatewayError::InvalidRequest(format!(
                    "duplicate section `{}`",
                    s.name
                )));
            }
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_output_tokens must be positive".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub dim: usize,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, provider_id: impl Into<String>) -> Self {
        Self {
            dim: values.len(),
            values,
            provider_id: provider_id.into(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        cosine(&self.values, &other.values)
    }
}

/// Cosine similarity; zero when either side has zero norm or dims differ.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return 0.0;
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub provider_id: ProviderKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub embedding_model: Option<String>,
    pub embedding_dim: usize,
    pub cache_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self::mock(7)
    }
}

impl ProviderConfig {
    pub fn mock(seed: u64) -> Self {
        Self {
            provider_id: ProviderKind::Mock,
            endpoint: None,
            model_name: None,
            embedding_model: None,
            embedding_dim: MOCK_EMBEDDING_DIM,
            cache_dir: None,
            seed: Some(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(GatewayError::InvalidConfig(
                "embedding_dim must be positive".into(),
            ));
        }
        match self.provider_id {
            ProviderKind::Mock if self.seed.is_none() => Err(GatewayError::InvalidConfig(
                "mock provider requires a seed".into(),
            )),
            ProviderKind::External if self.endpoint.is_none() || self.model_name.is_none() => {
                Err(GatewayError::InvalidConfig(
                    "external provider requires endpoint and model_name".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// A model backend. Implementations must be safe to call concurrently.
pub trait LlmProvider: Send + Sync {
    fn provider_id(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    fn complete(&self, req: &CompletionRequest) -> Result<String>;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Validating, logging front door to a provider.
pub struct Gateway {
    provider: Box<dyn LlmProvider>,
    deterministic: bool,
    logs: Mutex<HashMap<String, Arc<Mutex<PromptLog>>>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.provider_id())
            .field("deterministic", &self.deterministic)
            .finish()
    }
}

impl Gateway {
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.provider_id {
            ProviderKind::Mock => Ok(Self::new(
                Box::new(MockProvider::new(
                    cfg.seed.unwrap_or_default(),
                    cfg.embedding_dim,
                )),
                true,
            )),
            ProviderKind::External => Ok(Self::new(Box::new(ExternalProvider::new(cfg)?), false)),
        }
    }

    pub fn mock(seed: u64) -> Self {
        Self::new(Box::new(MockProvider::new(seed, MOCK_EMBEDDING_DIM)), true)
    }

    /// `deterministic` gateways reject sampling temperatures above zero.
    pub fn new(provider: Box<dyn LlmProvider>, deterministic: bool) -> Self {
        Self {
            provider,
            deterministic,
            logs: Mutex::new(HashMap::new()),
        }
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn embedding_dim(&self) -> usize {
        self.provider.embedding_dim()
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// Routes completions traced to `incident_id` into `log`.
    pub fn attach_log(&self, incident_id: &str, log: Arc<Mutex<PromptLog>>) {
        self.logs.lock().insert(incident_id.to_string(), log);
    }

    pub fn detach_log(&self, incident_id: &str) -> Option<Arc<Mutex<PromptLog>>> {
        self.logs.lock().remove(incident_id)
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<String> {
        req.validate()?;
        if self.deterministic && req.temperature != 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be 0 in deterministic mode".into(),
            ));
        }
        let out = self.provider.complete(req)?;
        if out.trim().is_empty() {
            return Err(GatewayError::SchemaViolation {
                schema: req.schema_hint.map_or("text", SchemaHint::as_str).into(),
                detail: "empty completion".into(),
            });
        }
        self.record(req, &out)?;
        Ok(out)
    }

    /// Completes and parses the output as `T`, retrying once on a parse failure.
    pub fn complete_as<T: DeserializeOwned>(&self, req: &CompletionRequest) -> Result<T> {
        let first = self.complete(req)?;
        match serde_json::from_str::<T>(extract_json(&first)) {
            Ok(v) => Ok(v),
            Err(_) => {
                let second = self.complete(req)?;
                serde_json::from_str::<T>(extract_json(&second)).map_err(|e| {
                    GatewayError::SchemaViolation {
                        schema: req.schema_hint.map_or("text", SchemaHint::as_str).into(),
                        detail: e.to_string(),
                    }
                })
            }
        }
    }

    pub fn embed<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<EmbeddingVector>> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let owned: Vec<String> = texts.iter().map(|t| t.as_ref().to_string()).collect();
        if owned.iter().any(|t| t.trim().is_empty()) {
            return Err(GatewayError::EmptyText);
        }
        let out = self.provider.embed(&owned)?;
        if out.len() != owned.len() || out.iter().any(|v| v.dim != self.embedding_dim()) {
            return Err(GatewayError::SchemaViolation {
                schema: "embedding".into(),
                detail: "provider returned wrong count or dimension".into(),
            });
        }
        Ok(out)
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed(&[text])?.remove(0))
    }

    /// Cosine similarity of two texts under this gateway's embedder.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        let v = self.embed(&[a, b])?;
        Ok(v[0].cosine(&v[1]))
    }

    fn record(&self, req: &CompletionRequest, response: &str) -> Result<()> {
        let Some(trace) = &req.trace else {
            return Ok(());
        };
        let log = self.logs.lock().get(&trace.incident_id).cloned();
        if let Some(log) = log {
            log.lock().append(trace, req, response)?;
        }
        Ok(())
    }
}

/// Trims prose or code fences some providers wrap around JSON.
fn extract_json(text: &str) -> &str {
    let start = text.find(['{', '[']);
    let end = text.rfind(['}', ']']);
    match (start, end) {
        (Some(s), Some(e)) if e >= s => &text[s..=e],
        _ => text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Flaky {
        calls: Mutex<u32>,
        outputs: Vec<&'static str>,
    }

    impl LlmProvider for Flaky {
        fn provider_id(&self) -> &str {
            "flaky"
        }
        fn embedding_dim(&self) -> usize {
            4
        }
        fn complete(&self, _req: &CompletionRequest) -> Result<String> {
            let mut calls = self.calls.lock();
            let out = self.outputs[(*calls as usize).min(self.outputs.len() - 1)];
            *calls += 1;
            Ok(out.to_string())
        }
        fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
            Ok(texts
                .iter()
                .map(|_| EmbeddingVector::new(vec![1.0, 0.0, 0.0, 0.0], "flaky"))
                .collect())
        }
    }

    fn req() -> CompletionRequest {
        CompletionRequest::new(SchemaHint::Summary).section("Previous Summary", "x")
    }

    #[test]
    fn empty_sections_rejected() {
        let gw = Gateway::mock(7);
        let r = CompletionRequest::new(SchemaHint::Precondition);
        assert!(matches!(
            gw.complete(&r),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn duplicate_section_names_rejected() {
        let gw = Gateway::mock(7);
        let r = req().section("Previous Summary", "y");
        assert!(matches!(
            gw.complete(&r),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn deterministic_mode_requires_zero_temperature() {
        let gw = Gateway::mock(7);
        let mut r = req();
        r.temperature = 0.7;
        assert!(matches!(
            gw.complete(&r),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn schema_violation_retries_once_then_fails() {
        let gw = Gateway::new(
            Box::new(Flaky {
                calls: Mutex::new(0),
                outputs: vec!["not json", "{\"summary\": \"ok\"}"],
            }),
            false,
        );
        let out: schema::SummaryOut = gw.complete_as(&req()).unwrap();
        assert_eq!(out.summary, "ok");

        let gw = Gateway::new(
            Box::new(Flaky {
                calls: Mutex::new(0),
                outputs: vec!["nope", "still nope", "{\"summary\": \"late\"}"],
            }),
            false,
        );
        let err = gw.complete_as::<schema::SummaryOut>(&req()).unwrap_err();
        assert!(matches!(err, GatewayError::SchemaViolation { .. }));
    }

    #[test]
    fn json_is_extracted_from_fenced_output() {
        assert_eq!(extract_json("```json\n{\"a\":1}\n```"), "{\"a\":1}");
    }

    #[test]
    fn provider_config_invariants() {
        assert!(ProviderConfig::mock(1).validate().is_ok());
        let mut cfg = ProviderConfig::mock(1);
        cfg.seed = None;
        assert!(cfg.validate().is_err());
        cfg.provider_id = ProviderKind::External;
        assert!(cfg.validate().is_err());
        cfg.endpoint = Some("http://localhost:1".into());
        cfg.model_name = Some("m".into());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn empty_embedding_text_rejected() {
        let gw = Gateway::mock(7);
        assert!(matches!(gw.embed(&["  "]), Err(GatewayError::EmptyText)));
        let none: [&str; 0] = [];
        assert!(matches!(gw.embed(&none), Err(GatewayError::EmptyText)));
    }
}
