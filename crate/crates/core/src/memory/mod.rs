//! Three-tier memory: working memory per live incident, a library of closed
//! cases, and long-term Key–Condition–Action knowledge.
//!
//! The KCA store, the case library and each incident's working memory are
//! independent write domains. Each sits behind its own lock, so readers see
//! either the state before or after a write, never a partial one.

mod distill;
mod episodic;
mod kca;
mod working;

pub use distill::{
    case_request, consolidate_long_term, distill_playbook, ConsolidationReport, PlaybookDoc,
    CONSOLIDATE_WHO, SYSTEM_WHO,
};
pub use episodic::{
    build_case, CaseAction, CaseFilter, CaseMeta, EpisodicCase, EpisodicStore, HistoryEntry,
};
pub use kca::{
    template_slots, AuditRecord, KcaDraft, KcaEntry, KcaKey, KcaPatch, KcaQuery, KcaStats,
    KcaStore, MergeOutcome, Provenance, STORE_FORMAT,
};
pub use working::{
    AttemptedAction, IncidentMeta, Note, PreconditionNote, StampedEvent, TimelineEntry,
    WorkingCaps, WorkingItem, WorkingMemoryState,
};

use crate::llm_gateway::{Gateway, GatewayError};
use crate::reasoning::FeedbackRecord;
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("embedding dimension mismatch: store has {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("template slot `{0}` is not declared in slots")]
    OrphanSlot(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("incident `{0}` is closed")]
    IncidentClosed(String),

    #[error("incident `{0}` is still open")]
    IncidentStillOpen(String),

    #[error("incident `{0}` has no critical events to promote")]
    NothingToPromote(String),

    #[error("incident `{0}` was already promoted")]
    AlreadyPromoted(String),

    #[error("unknown incident `{0}`")]
    UnknownIncident(String),

    #[error("document `{0}` is empty")]
    EmptyDocument(String),

    #[error("invalid request: {0}")]
    Invalid(String),

    #[error("store format: {0}")]
    Format(String),

    #[error(transparent)]
    Gateway(#[from] GatewayError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub k: usize,
    pub m: usize,
    pub dedup_threshold: f64,
    pub event_cap: usize,
    pub note_cap: usize,
    /// Weight of the key cosine in the combined KCA score.
    pub key_weight: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            k: 5,
            m: 3,
            dedup_threshold: 0.92,
            event_cap: 50,
            note_cap: 50,
            key_weight: 0.5,
        }
    }
}

impl MemoryConfig {
    pub fn caps(&self) -> WorkingCaps {
        WorkingCaps {
            events: self.event_cap,
            notes: self.note_cap,
        }
    }
}

/// What one decision point sees of memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalBundle {
    pub kca_hits: Vec<(KcaEntry, f64)>,
    pub episodic_hits: Vec<(EpisodicCase, f64)>,
    pub working: WorkingMemoryState,
}

/// Expert review operations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ReviewOp {
    List,
    Edit {
        kca_id: String,
        patch: KcaPatch,
    },
    Deactivate {
        kca_id: String,
    },
    Author {
        stage: crate::domain::Phase,
        service_domain: String,
        #[serde(default)]
        scope: String,
        condition: String,
        action_template: String,
        #[serde(default)]
        slots: Option<Vec<String>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ReviewResult {
    Listed(Vec<KcaEntry>),
    Entry(KcaEntry),
}

#[derive(Debug, Clone)]
struct Paths {
    kca: PathBuf,
    audit: PathBuf,
    episodic: PathBuf,
}

impl Paths {
    fn in_dir(dir: &Path) -> Self {
        Self {
            kca: dir.join("kca.jsonl"),
            audit: dir.join("kca_audit.jsonl"),
            episodic: dir.join("episodic.jsonl"),
        }
    }
}

type Working = Arc<RwLock<WorkingMemoryState>>;

/// Facade over the three tiers.
pub struct Memory {
    cfg: MemoryConfig,
    gateway: Arc<Gateway>,
    kca: RwLock<KcaStore>,
    episodic: RwLock<EpisodicStore>,
    working: RwLock<HashMap<String, Working>>,
    paths: Option<Paths>,
    /// Serializes writers that touch more than one tier or the files.
    admin: Mutex<u64>,
}

impl std::fmt::Debug for Memory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Memory")
            .field("kca", &self.kca.read().len())
            .field("episodic", &self.episodic.read().len())
            .field("incidents", &self.working.read().len())
            .finish_non_exhaustive()
    }
}

impl Memory {
    /// Memory held only in this process.
    pub fn in_memory(cfg: MemoryConfig, gateway: Arc<Gateway>) -> Self {
        let kca = KcaStore::new(gateway.embedding_dim(), gateway.provider_id())
            .with_key_weight(cfg.key_weight);
        Self {
            cfg,
            gateway,
            kca: RwLock::new(kca),
            episodic: RwLock::new(EpisodicStore::new()),
            working: RwLock::new(HashMap::new()),
            paths: None,
            admin: Mutex::new(0),
        }
    }

    /// Memory backed by files in `dir`, loading whatever is already there.
    pub fn open(dir: &Path, cfg: MemoryConfig, gateway: Arc<Gateway>) -> Result<Self, MemoryError> {
        std::fs::create_dir_all(dir)?;
        let paths = Paths::in_dir(dir);
        let mut kca = if paths.kca.exists() {
            let store = KcaStore::load(&paths.kca)?;
            if store.dim() != gateway.embedding_dim() {
                return Err(MemoryError::DimMismatch {
                    expected: gateway.embedding_dim(),
                    got: store.dim(),
                });
            }
            store.with_key_weight(cfg.key_weight)
        } else {
            KcaStore::new(gateway.embedding_dim(), gateway.provider_id())
                .with_key_weight(cfg.key_weight)
        };
        kca.load_audit(&paths.audit)?;
        let audited = kca.audit_log().last().map_or(0, |r| r.seq);
        let episodic = EpisodicStore::load(&paths.episodic)?;
        Ok(Self {
            cfg,
            gateway,
            kca: RwLock::new(kca),
            episodic: RwLock::new(episodic),
            working: RwLock::new(HashMap::new()),
            paths: Some(paths),
            admin: Mutex::new(audited),
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    fn persist_kca(&self, audited: &mut u64) -> Result<(), MemoryError> {
        if let Some(p) = &self.paths {
            let store = self.kca.read();
            store.save(&p.kca)?;
            *audited = store.append_audit(&p.audit, *audited)?;
        }
        Ok(())
    }

    fn persist_episodic(&self) -> Result<(), MemoryError> {
        if let Some(p) = &self.paths {
            self.episodic.read().save(&p.episodic)?;
        }
        Ok(())
    }

    /// Runs a KCA mutation on a copy and publishes it only on success, so a
    /// failed multi-entry operation leaves the store untouched.
    fn mutate_kca<T>(
        &self,
        f: impl FnOnce(&mut KcaStore) -> Result<T, MemoryError>,
    ) -> Result<T, MemoryError> {
        let mut audited = self.admin.lock();
        let mut draft = self.kca.read().clone();
        let out = f(&mut draft)?;
        *self.kca.write() = draft;
        self.persist_kca(&mut audited)?;
        Ok(out)
    }

    // Long-term memory.

    pub fn kca_snapshot(&self) -> KcaStore {
        self.kca.read().clone()
    }

    pub fn kca_get(&self, id: &str) -> Option<KcaEntry> {
        self.kca.read().get(id).cloned()
    }

    pub fn kca_active_count(&self) -> usize {
        self.kca.read().active_count()
    }

    pub fn upsert_kca(&self, draft: KcaDraft, now: DateTime<Utc>) -> Result<String, MemoryError> {
        let gw = self.gateway.clone();
        self.mutate_kca(|s| s.upsert(&gw, draft, now))
    }

    pub fn retrieve_kca(
        &self,
        q: &KcaQuery,
        k: usize,
    ) -> Result<Vec<(KcaEntry, f64)>, MemoryError> {
        self.kca.read().retrieve(&self.gateway, q, k)
    }

    pub fn distill_playbook(
        &self,
        doc: &PlaybookDoc,
        now: DateTime<Utc>,
    ) -> Result<ConsolidationReport, MemoryError> {
        let gw = self.gateway.clone();
        let thr = self.cfg.dedup_threshold;
        self.mutate_kca(|s| distill_playbook(s, &gw, doc, thr, now))
    }

    pub fn consolidate_long_term(
        &self,
        cases: &[EpisodicCase],
        now: DateTime<Utc>,
    ) -> Result<ConsolidationReport, MemoryError> {
        let gw = self.gateway.clone();
        let thr = self.cfg.dedup_threshold;
        self.mutate_kca(|s| consolidate_long_term(s, &gw, cases, thr, now))
    }

    pub fn expert_review(
        &self,
        op: ReviewOp,
        who: &str,
        now: DateTime<Utc>,
    ) -> Result<ReviewResult, MemoryError> {
        let gw = self.gateway.clone();
        match op {
            ReviewOp::List => Ok(ReviewResult::Listed(self.kca.read().entries().to_vec())),
            ReviewOp::Edit { kca_id, patch } => self
                .mutate_kca(|s| s.edit(&gw, &kca_id, &patch, who, now))
                .map(ReviewResult::Entry),
            ReviewOp::Deactivate { kca_id } => self
                .mutate_kca(|s| s.deactivate(&kca_id, who, now))
                .map(ReviewResult::Entry),
            ReviewOp::Author {
                stage,
                service_domain,
                scope,
                condition,
                action_template,
                slots,
            } => {
                let mut draft = KcaDraft::new(
                    KcaKey {
                        stage,
                        service_domain,
                        scope,
                    },
                    condition,
                    action_template,
                    Provenance::Expert,
                    format!("expert:{who}"),
                );
                draft.slots = slots;
                self.mutate_kca(|s| s.author(&gw, draft, who, now))
                    .map(ReviewResult::Entry)
            }
        }
    }

    pub fn audit_log(&self) -> Vec<AuditRecord> {
        self.kca.read().audit_log().to_vec()
    }

    /// Usage counters. These are bookkeeping, not knowledge edits, so they
    /// are not audited.
    pub fn note_retrieved(&self, ids: &[String]) -> Result<(), MemoryError> {
        self.bump(|s| s.bump_retrieved(ids))
    }

    pub fn note_recommended(&self, id: &str) -> Result<(), MemoryError> {
        self.bump(|s| s.bump_recommended(id))
    }

    pub fn note_confirmed(&self, id: &str) -> Result<(), MemoryError> {
        self.bump(|s| s.bump_confirmed(id))
    }

    pub fn note_rejected(&self, id: &str) -> Result<(), MemoryError> {
        self.bump(|s| s.bump_rejected(id))
    }

    /// Infallible counter updates skip the copy-and-publish step.
    fn bump(&self, f: impl FnOnce(&mut KcaStore)) -> Result<(), MemoryError> {
        let mut audited = self.admin.lock();
        f(&mut self.kca.write());
        self.persist_kca(&mut audited)
    }

    // Episodic memory.

    pub fn episodic_snapshot(&self) -> EpisodicStore {
        self.episodic.read().clone()
    }

    pub fn retrieve_episodic(
        &self,
        precondition_text: &str,
        m: usize,
        filter: &CaseFilter,
    ) -> Result<Vec<(EpisodicCase, f64)>, MemoryError> {
        if m == 0 {
            return Err(MemoryError::Invalid("m must be at least 1".into()));
        }
        if self.episodic.read().is_empty() {
            return Ok(Vec::new());
        }
        let q = self.gateway.embed_one(precondition_text)?;
        Ok(self.episodic.read().rank(&q.values, m, filter))
    }

    /// Adds an externally built case, e.g. from a replayed history.
    pub fn insert_case(&self, case: EpisodicCase) -> Result<(), MemoryError> {
        let _guard = self.admin.lock();
        self.episodic.write().insert(case)?;
        self.persist_episodic()
    }

    // Working memory.

    pub fn open_incident(&self, incident_id: &str, meta: IncidentMeta) -> WorkingMemoryState {
        let mut map = self.working.write();
        let wm = map.entry(incident_id.to_string()).or_insert_with(|| {
            Arc::new(RwLock::new(WorkingMemoryState::open(
                incident_id,
                meta,
                self.cfg.caps(),
            )))
        });
        let out = wm.read().clone();
        out
    }

    fn working_of(&self, incident_id: &str) -> Result<Working, MemoryError> {
        self.working
            .read()
            .get(incident_id)
            .cloned()
            .ok_or_else(|| MemoryError::UnknownIncident(incident_id.to_string()))
    }

    pub fn record_working(
        &self,
        incident_id: &str,
        item: WorkingItem,
    ) -> Result<WorkingMemoryState, MemoryError> {
        let wm = self.working_of(incident_id)?;
        let mut guard = wm.write();
        guard.record(item)?;
        Ok(guard.clone())
    }

    pub fn working_snapshot(&self, incident_id: &str) -> Result<WorkingMemoryState, MemoryError> {
        Ok(self.working_of(incident_id)?.read().clone())
    }

    /// Marks the incident closed; working memory becomes read-only.
    pub fn close_incident(&self, incident_id: &str, at: DateTime<Utc>) -> Result<(), MemoryError> {
        let wm = self.working_of(incident_id)?;
        let mut guard = wm.write();
        if guard.closed_at.is_none() {
            guard.closed_at = Some(at);
        }
        Ok(())
    }

    /// Builds and stores the episodic case of a closed incident.
    pub fn promote_to_episodic(
        &self,
        incident_id: &str,
        feedback: &[FeedbackRecord],
    ) -> Result<EpisodicCase, MemoryError> {
        let wm = self.working_of(incident_id)?;
        let _guard = self.admin.lock();
        let mut state = wm.write();
        let case = build_case(&state, feedback, &self.gateway)?;
        self.episodic.write().insert(case.clone())?;
        state.promoted = true;
        drop(state);
        self.persist_episodic()?;
        Ok(case)
    }
}

#[cfg(test)]
mod tests;
