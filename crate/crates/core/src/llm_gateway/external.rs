//! OpenAI-compatible HTTP provider with a content-addressed response cache.

use super::{
    prompt, CompletionRequest, EmbeddingVector, GatewayError, LlmProvider, ProviderConfig, Result,
    SchemaHint,
};
use parking_lot::Mutex;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

/// Environment variable holding the bearer token. Never logged.
pub const API_KEY_ENV: &str = "OUTAGE_LLM_API_KEY";

pub struct ExternalProvider {
    endpoint: String,
    model: String,
    embedding_model: String,
    dim: usize,
    cache_dir: Option<PathBuf>,
    agent: ureq::Agent,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl std::fmt::Debug for ExternalProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalProvider")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl ExternalProvider {
    pub fn new(cfg: &ProviderConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| GatewayError::InvalidConfig("endpoint missing".into()))?;
        let model = cfg
            .model_name
            .clone()
            .ok_or_else(|| GatewayError::InvalidConfig("model_name missing".into()))?;
        if let Some(dir) = &cfg.cache_dir {
            fs::create_dir_all(dir)?;
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            embedding_model: cfg.embedding_model.clone().unwrap_or_else(|| model.clone()),
            model,
            dim: cfg.embedding_dim,
            cache_dir: cfg.cache_dir.clone(),
            agent,
            key_locks: Mutex::new(HashMap::new()),
        })
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        self.key_locks
            .lock()
            .entry(key.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(())))
            .clone()
    }

    /// Serves `body` from cache when present, otherwise calls `fetch` and
    /// stores its payload. Writes for one key are serialized.
    fn cached(&self, body: &Value, fetch: impl FnOnce() -> Result<String>) -> Result<String> {
        let Some(dir) = &self.cache_dir else {
            return fetch();
        };
        let key = hex::encode(Sha256::digest(body.to_string().as_bytes()));
        let lock = self.key_lock(&key);
        let _guard = lock.lock();
        let path = dir.join(format!("{key}.txt"));
        if let Ok(hit) = fs::read_to_string(&path) {
            return Ok(hit);
        }
        let payload = fetch()?;
        write_atomic(&path, &payload)?;
        Ok(payload)
    }

    fn post(&self, route: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{}", self.endpoint, route);
        let mut req = self.agent.post(&url);
        if let Ok(token) = std::env::var(API_KEY_ENV) {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| GatewayError::ProviderUnavailable(format!("{url}: {e}")))?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| GatewayError::ProviderUnavailable(format!("{url}: bad body: {e}")))
    }
}

fn write_atomic(path: &Path, payload: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, payload)?;
    fs::rename(tmp, path)
}

fn schema_instruction(schema: Option<SchemaHint>) -> &'static str {
    match schema {
        Some(SchemaHint::Precondition) => {
            r#"Reply with JSON only: {"precondition": string, "stage": string}"#
        }
        Some(SchemaHint::Recommendation) => {
            r#"Reply with JSON only, either {"verdict":"recommend","action":string,"confidence":number in [0,1],"rationale":string,"supports":{"kca_ids":[string],"case_ids":[string]}} or {"verdict":"insufficient","missing":string}. Keep {slot} markers you cannot fill."#
        }
        Some(SchemaHint::KcaList) => {
            r#"Reply with JSON only: {"entries":[{"stage":string,"service_domain":string,"scope":string,"condition":string,"action_template":string}]}. Use {service}, {region}, {role} slots for specifics."#
        }
        Some(SchemaHint::ActionList) => {
            r#"Reply with JSON only: {"actions":[{"ts":string,"action_text":string,"source_quote":string}]} listing actions that were actually executed."#
        }
        Some(SchemaHint::Summary) | Some(SchemaHint::EventSummary) => {
            r#"Reply with JSON only: {"summary": string of at most 400 characters}"#
        }
        Some(SchemaHint::EventType) => r#"Reply with JSON only: {"event_type": string}"#,
        Some(SchemaHint::MatchVerdict) => {
            r#"Reply with JSON only: {"match": boolean, "score": number in [0,1]}"#
        }
        None => "",
    }
}

impl LlmProvider for ExternalProvider {
    fn provider_id(&self) -> &str {
        "external"
    }

    fn embedding_dim(&self) -> usize {
        self.dim
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        let system = req
            .section_body(prompt::SYSTEM)
            .unwrap_or("You are an outage management reasoning agent.");
        let mut user = String::new();
        for s in req
            .prompt_sections
            .iter()
            .filter(|s| s.name != prompt::SYSTEM)
        {
            user.push_str(&format!("## {}\n{}\n\n", s.name, s.body));
        }
        user.push_str(schema_instruction(req.schema_hint));
        let body = json!({
            "model": self.model,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        self.cached(&body, || {
            let v = self.post("chat/completions", &body)?;
            v["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| GatewayError::ProviderUnavailable("no completion content".into()))
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let body = json!({
            "model": self.embedding_model,
            "input": texts,
            "dimensions": self.dim,
        });
        let raw = self.cached(&body, || {
            let v = self.post("embeddings", &body)?;
            let data = v["data"]
                .as_array()
                .ok_or_else(|| GatewayError::ProviderUnavailable("no embedding data".into()))?;
            let vectors: Vec<Vec<f64>> = data
                .iter()
                .map(|d| {
                    d["embedding"]
                        .as_array()
                        .map(|a| a.iter().filter_map(Value::as_f64).collect())
                        .unwrap_or_default()
                })
                .collect();
            serde_json::to_string(&vectors).map_err(|e| GatewayError::SchemaViolation {
                schema: "embedding".into(),
                detail: e.to_string(),
            })
        })?;
        let vectors: Vec<Vec<f64>> =
            serde_json::from_str(&raw).map_err(|e| GatewayError::SchemaViolation {
                schema: "embedding".into(),
                detail: e.to_string(),
            })?;
        Ok(vectors
            .into_iter()
            .map(|v| EmbeddingVector::new(v, "external"))
            .collect())
    }
}
