//! System configuration: one TOML file plus `OUTAGE_*` environment overrides.

use crate::llm_gateway::{ProviderConfig, ProviderKind};
use crate::memory::MemoryConfig;
use crate::perception::PerceptionConfig;
use crate::reasoning::ReasoningConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("environment variable {var}: cannot parse `{value}`")]
    Env { var: String, value: String },

    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Each recommendation and each ground-truth action pairs at most once.
    #[default]
    OneToOne,
    /// Several recommendations may match the same ground-truth action; each
    /// recommendation still matches at most one.
    ManyToOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub window_s: i64,
    pub threshold: f64,
    pub g2_threshold: f64,
    /// Accept ground truth before the recommendation as long as
    /// `|delta_t| <= window_s`.
    pub symmetric_window: bool,
    pub mode: MatchMode,
    /// Exact maximum-weight assignment instead of greedy.
    pub optimal: bool,
    /// Rescore candidate pairs with the gateway's match verdict.
    pub judge: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window_s: 1800,
            threshold: 0.75,
            g2_threshold: 0.8,
            symmetric_window: false,
            mode: MatchMode::OneToOne,
            optimal: false,
            judge: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window_s <= 0 {
            return Err(ConfigError::Invalid(
                "eval.window_s must be positive".into(),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ConfigError::Invalid(
                "eval.threshold must lie in (0, 1)".into(),
            ));
        }
        if !(self.g2_threshold > 0.0 && self.g2_threshold <= 1.0) {
            return Err(ConfigError::Invalid(
                "eval.g2_threshold must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    pub topology: Option<PathBuf>,
    pub playbook_dir: Option<PathBuf>,
    /// Static bearer token. Prefer `OUTAGE_API_TOKEN` over writing it here.
    #[serde(skip_serializing)]
    pub api_token: Option<String>,
    /// Minutes between background consolidation runs; off when unset.
    pub consolidate_every_min: Option<u64>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("outage-data"),
            topology: None,
            playbook_dir: None,
            api_token: None,
            consolidate_every_min: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    pub provider: ProviderConfig,
    pub perception: PerceptionConfig,
    pub memory: MemoryConfig,
    pub reasoning: ReasoningConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl SystemConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` when given, then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies overrides from `lookup`, which maps a variable name to its
    /// value. Split out from [`SystemConfig::load`] for testing.
    pub fn apply_env(
        &mut self,
        lookup: impl Fn(&str) -> Option<String>,
    ) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(var: &str, v: String) -> Result<T, ConfigError> {
            v.trim().parse().map_err(|_| ConfigError::Env {
                var: var.to_string(),
                value: v,
            })
        }
        macro_rules! set {
            ($var:literal, $field:expr) => {
                if let Some(v) = lookup($var) {
                    $field = parse($var, v)?;
                }
            };
        }
        if let Some(v) = lookup("OUTAGE_PROVIDER") {
            self.provider.provider_id = match v.trim().to_ascii_lowercase().as_str() {
                "mock" => ProviderKind::Mock,
                "external" => ProviderKind::External,
                _ => {
                    return Err(ConfigError::Env {
                        var: "OUTAGE_PROVIDER".into(),
                        value: v,
                    })
                }
            };
        }
        if let Some(v) = lookup("OUTAGE_LLM_ENDPOINT") {
            self.provider.endpoint = Some(v);
        }
        if let Some(v) = lookup("OUTAGE_LLM_MODEL") {
            self.provider.model_name = Some(v);
        }
        if let Some(v) = lookup("OUTAGE_SEED") {
            self.provider.seed = Some(parse("OUTAGE_SEED", v)?);
        }
        set!("OUTAGE_WINDOW_S", self.perception.window_length_s);
        set!(
            "OUTAGE_PROMOTE_THRESHOLD",
            self.perception.promote_threshold
        );
        set!("OUTAGE_K", self.memory.k);
        set!("OUTAGE_M", self.memory.m);
        set!("OUTAGE_DEDUP_THRESHOLD", self.memory.dedup_threshold);
        set!("OUTAGE_MAX_ROUNDS", self.reasoning.max_rounds);
        set!("OUTAGE_MIN_CONFIDENCE", self.reasoning.min_confidence);
        set!(
            "OUTAGE_SUPPRESS_THRESHOLD",
            self.reasoning.suppress_threshold
        );
        set!("OUTAGE_MATCH_THRESHOLD", self.reasoning.match_threshold);
        set!("OUTAGE_TTL_MIN", self.reasoning.ttl_min);
        set!("OUTAGE_EVAL_WINDOW_S", self.eval.window_s);
        set!("OUTAGE_EVAL_THRESHOLD", self.eval.threshold);
        if let Some(v) = lookup("OUTAGE_BIND") {
            self.service.bind = v;
        }
        if let Some(v) = lookup("OUTAGE_DATA_DIR") {
            self.service.data_dir = PathBuf::from(v);
        }
        if let Some(v) = lookup("OUTAGE_API_TOKEN") {
            self.service.api_token = Some(v).filter(|t| !t.trim().is_empty());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.provider
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.reasoning
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.eval.validate()?;
        if self.perception.window_length_s == 0 {
            return Err(ConfigError::Invalid(
                "perception.window_length_s must be positive".into(),
            ));
        }
        if self.memory.k == 0 || self.memory.m == 0 {
            return Err(ConfigError::Invalid(
                "memory.k and memory.m must be at least 1".into(),
            ));
        }
        if !(self.memory.dedup_threshold > 0.0 && self.memory.dedup_threshold < 1.0) {
            return Err(ConfigError::Invalid(
                "memory.dedup_threshold must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn defaults_are_valid() {
        let cfg = SystemConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.perception.window_length_s, 300);
        assert_eq!(cfg.memory.k, 5);
        assert_eq!(cfg.reasoning.max_rounds, 3);
        assert_eq!(cfg.eval.window_s, 1800);
    }

    #[test]
    fn toml_sections_override_defaults() {
        let cfg = SystemConfig::from_toml(
            "[memory]\nk = 8\n\n[reasoning]\nmin_confidence = 0.5\n\n[eval]\nmode = \"many_to_one\"\n",
        )
        .unwrap();
        assert_eq!(cfg.memory.k, 8);
        assert_eq!(cfg.memory.m, 3);
        assert_eq!(cfg.reasoning.min_confidence, 0.5);
        assert_eq!(cfg.eval.mode, MatchMode::ManyToOne);
    }

    #[test]
    fn env_overrides_win() {
        let env: HashMap<&str, &str> = [
            ("OUTAGE_K", "9"),
            ("OUTAGE_TTL_MIN", "15"),
            ("OUTAGE_API_TOKEN", "s3cret"),
        ]
        .into_iter()
        .collect();
        let mut cfg = SystemConfig::default();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string()))
            .unwrap();
        assert_eq!(cfg.memory.k, 9);
        assert_eq!(cfg.reasoning.ttl_min, 15);
        assert_eq!(cfg.service.api_token.as_deref(), Some("s3cret"));
        let bad: HashMap<&str, &str> = [("OUTAGE_K", "many")].into_iter().collect();
        assert!(SystemConfig::default()
            .apply_env(|k| bad.get(k).map(|v| v.to_string()))
            .is_err());
    }

    #[test]
    fn token_is_not_serialized() {
        let mut cfg = SystemConfig::default();
        cfg.service.api_token = Some("s3cret".into());
        let text = toml::to_string(&cfg).unwrap();
        assert!(!text.contains("s3cret"));
    }
}
