//! Long-term Key–Condition–Action store with dual-embedding retrieval.

use super::MemoryError;
use crate::domain::Phase;
use crate::llm_gateway::{cosine, EmbeddingVector, Gateway};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const STORE_FORMAT: u32 = 1;

/// Contextual scope of a knowledge unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KcaKey {
    pub stage: Phase,
    pub service_domain: String,
    #[serde(default)]
    pub scope: String,
}

impl KcaKey {
    /// Text embedded as the key.
    pub fn text(&self) -> String {
        [
            self.stage.as_str(),
            self.service_domain.trim(),
            self.scope.trim(),
        ]
        .iter()
        .filter(|s| !s.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Playbook,
    Distilled,
    Expert,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KcaStats {
    pub times_retrieved: u64,
    pub times_recommended: u64,
    pub times_confirmed: u64,
    pub times_rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KcaEntry {
    pub kca_id: String,
    pub key: KcaKey,
    pub condition: String,
    pub action_template: String,
    pub slots: Vec<String>,
    pub provenance: Provenance,
    pub source_ref: String,
    /// Sources later merged into this entry. The originating provenance and
    /// `source_ref` never change.
    #[serde(default)]
    pub merged_sources: Vec<String>,
    pub key_embedding: EmbeddingVector,
    pub condition_embedding: EmbeddingVector,
    pub stats: KcaStats,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub active: bool,
}

impl KcaEntry {
    /// Entry as JSON without its embeddings, for listings and audit records.
    pub fn view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("entry serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("key_embedding");
            obj.remove("condition_embedding");
        }
        v
    }

    pub fn has_source(&self, source: &str) -> bool {
        self.source_ref == source || self.merged_sources.iter().any(|s| s == source)
    }
}

/// Slot names referenced as `{name}` in a template, in first-use order.
pub fn template_slots(template: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else { break };
        let name = after[..close].trim();
        if !name.is_empty()
            && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
            && !out.iter().any(|s| s == name)
        {
            out.push(name.to_string());
        }
        rest = &after[close + 1..];
    }
    out
}

/// Input to [`KcaStore::upsert`]. Embeddings are computed when absent.
#[derive(Debug, Clone, PartialEq)]
pub struct KcaDraft {
    pub kca_id: Option<String>,
    pub key: KcaKey,
    pub condition: String,
    pub action_template: String,
    /// Defaults to the slots found in the template.
    pub slots: Option<Vec<String>>,
    pub provenance: Provenance,
    pub source_ref: String,
    pub key_embedding: Option<EmbeddingVector>,
    pub condition_embedding: Option<EmbeddingVector>,
}

impl KcaDraft {
    pub fn new(
        key: KcaKey,
        condition: impl Into<String>,
        action_template: impl Into<String>,
        provenance: Provenance,
        source_ref: impl Into<String>,
    ) -> Self {
        Self {
            kca_id: None,
            key,
            condition: condition.into(),
            action_template: action_template.into(),
            slots: None,
            provenance,
            source_ref: source_ref.into(),
            key_embedding: None,
            condition_embedding: None,
        }
    }
}

/// Text edits applied by an expert.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KcaPatch {
    pub stage: Option<Phase>,
    pub service_domain: Option<String>,
    pub scope: Option<String>,
    pub condition: Option<String>,
    pub action_template: Option<String>,
    pub slots: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KcaQuery {
    pub key_text: Option<String>,
    pub condition_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreHeader {
    format: u32,
    embedding_dim: usize,
    provider_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub who: String,
    pub when: DateTime<Utc>,
    pub op: String,
    pub kca_id: String,
    pub before: Option<serde_json::Value>,
    pub after: Option<serde_json::Value>,
}

/// Whether a candidate became a new entry or folded into an existing one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MergeOutcome {
    Created(String),
    Merged(String),
}

/// Exact full-scan store. Sizes here are thousands of entries, so a linear
/// pass over precomputed embeddings is both fast enough and trivially exact.
#[derive(Debug, Clone)]
pub struct KcaStore {
    dim: usize,
    provider_id: String,
    key_weight: f64,
    entries: Vec<KcaEntry>,
    next_id: u64,
    audit: Vec<AuditRecord>,
}

impl KcaStore {
    pub fn new(dim: usize, provider_id: impl Into<String>) -> Self {
        Self {
            dim,
            provider_id: provider_id.into(),
            key_weight: 0.5,
            entries: Vec::new(),
            next_id: 1,
            audit: Vec::new(),
        }
    }

    /// Weight of the key cosine in the combined score; the condition gets
    /// the rest.
    pub fn with_key_weight(mut self, w: f64) -> Self {
        self.key_weight = w.clamp(0.0, 1.0);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.entries.iter().filter(|e| e.active).count()
    }

    pub fn entries(&self) -> &[KcaEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&KcaEntry> {
        self.entries.iter().find(|e| e.kca_id == id)
    }

    fn index_of(&self, id: &str) -> Result<usize, MemoryError> {
        self.entries
            .iter()
            .position(|e| e.kca_id == id)
            .ok_or_else(|| MemoryError::NotFound(id.to_string()))
    }

    pub fn audit_log(&self) -> &[AuditRecord] {
        &self.audit
    }

    fn check_dim(&self, v: &EmbeddingVector) -> Result<(), MemoryError> {
        if v.dim != self.dim || v.values.len() != self.dim {
            return Err(MemoryError::DimMismatch {
                expected: self.dim,
                got: v.values.len(),
            });
        }
        Ok(())
    }

    fn embed(&self, gw: &Gateway, text: &str) -> Result<EmbeddingVector, MemoryError> {
        let v = gw.embed_one(text)?;
        self.check_dim(&v)?;
        Ok(v)
    }

    fn validate_slots(template: &str, slots: &[String]) -> Result<(), MemoryError> {
        for s in template_slots(template) {
            if !slots.contains(&s) {
                return Err(MemoryError::OrphanSlot(s));
            }
        }
        Ok(())
    }

    fn allocate_id(&mut self) -> String {
        loop {
            let id = format!("kca-{:06}", self.next_id);
            self.next_id += 1;
            if self.get(&id).is_none() {
                return id;
            }
        }
    }

    /// Inserts a new entry, or rewrites the texts of an existing one.
    pub fn upsert(
        &mut self,
        gw: &Gateway,
        draft: KcaDraft,
        now: DateTime<Utc>,
    ) -> Result<String, MemoryError> {
        let slots = draft
            .slots
            .clone()
            .unwrap_or_else(|| template_slots(&draft.action_template));
        Self::validate_slots(&draft.action_template, &slots)?;
        if draft.condition.trim().is_empty() || draft.action_template.trim().is_empty() {
            return Err(MemoryError::Invalid(
                "condition and action_template must be non-empty".into(),
            ));
        }
        if draft.source_ref.trim().is_empty() {
            return Err(MemoryError::Invalid("source_ref must be non-empty".into()));
        }
        let key_embedding = match draft.key_embedding {
            Some(v) => {
                self.check_dim(&v)?;
                v
            }
            None => self.embed(gw, &draft.key.text())?,
        };
        let condition_embedding = match draft.condition_embedding {
            Some(v) => {
                self.check_dim(&v)?;
                v
            }
            None => self.embed(gw, &draft.condition)?,
        };
        if let Some(id) = draft.kca_id.as_deref() {
            if let Ok(idx) = self.index_of(id) {
                let e = &mut self.entries[idx];
                e.key = draft.key;
                e.condition = draft.condition;
                e.action_template = draft.action_template;
                e.slots = slots;
                e.key_embedding = key_embedding;
                e.condition_embedding = condition_embedding;
                e.updated_at = now;
                return Ok(id.to_string());
            }
        }
        let id = match draft.kca_id {
            Some(id) => id,
            None => self.allocate_id(),
        };
        self.entries.push(KcaEntry {
            kca_id: id.clone(),
            key: draft.key,
            condition: draft.condition,
            action_template: draft.action_template,
            slots,
            provenance: draft.provenance,
            source_ref: draft.source_ref,
            merged_sources: Vec::new(),
            key_embedding,
            condition_embedding,
            stats: KcaStats::default(),
            created_at: now,
            updated_at: now,
            active: true,
        });
        self.entries.sort_by(|a, b| a.kca_id.cmp(&b.kca_id));
        Ok(id)
    }

    /// Applies an expert edit. Embeddings are recomputed only for the
    /// fields whose text changed.
    pub fn edit(
        &mut self,
        gw: &Gateway,
        id: &str,
        patch: &KcaPatch,
        who: &str,
        now: DateTime<Utc>,
    ) -> Result<KcaEntry, MemoryError> {
        let idx = self.index_of(id)?;
        let before = self.entries[idx].clone();
        let mut key = before.key.clone();
        if let Some(s) = patch.stage {
            key.stage = s;
        }
        if let Some(d) = &patch.service_domain {
            key.service_domain = d.clone();
        }
        if let Some(s) = &patch.scope {
            key.scope = s.clone();
        }
        let condition = patch
            .condition
            .clone()
            .unwrap_or_else(|| before.condition.clone());
        let template = patch
            .action_template
            .clone()
            .unwrap_or_else(|| before.action_template.clone());
        let slots = patch.slots.clone().unwrap_or_else(|| {
            if patch.action_template.is_some() {
                template_slots(&template)
            } else {
                before.slots.clone()
            }
        });
        Self::validate_slots(&template, &slots)?;
        let key_embedding = if key.text() != before.key.text() {
            self.embed(gw, &key.text())?
        } else {
            before.key_embedding.clone()
        };
        let condition_embedding = if condition != before.condition {
            self.embed(gw, &condition)?
        } else {
            before.condition_embedding.clone()
        };
        let e = &mut self.entries[idx];
        e.key = key;
        e.condition = condition;
        e.action_template = template;
        e.slots = slots;
        e.key_embedding = key_embedding;
        e.condition_embedding = condition_embedding;
        e.updated_at = now;
        let after = e.clone();
        self.push_audit(
            who,
            now,
            "edit",
            id,
            Some(before.view()),
            Some(after.view()),
        );
        Ok(after)
    }

    /// Deactivates without deleting, so the audit trail keeps the entry.
    pub fn deactivate(
        &mut self,
        id: &str,
        who: &str,
        now: DateTime<Utc>,
    ) -> Result<KcaEntry, MemoryError> {
        let idx = self.index_of(id)?;
        let before = self.entries[idx].view();
        let e = &mut self.entries[idx];
        e.active = false;
        e.updated_at = now;
        let after = e.clone();
        self.push_audit(who, now, "deactivate", id, Some(before), Some(after.view()));
        Ok(after)
    }

    /// Expert-authored entry.
    pub fn author(
        &mut self,
        gw: &Gateway,
        mut draft: KcaDraft,
        who: &str,
        now: DateTime<Utc>,
    ) -> Result<KcaEntry, MemoryError> {
        draft.provenance = Provenance::Expert;
        if draft.source_ref.trim().is_empty() {
            draft.source_ref = format!("expert:{who}");
        }
        let id = self.upsert(gw, draft, now)?;
        let after = self.get(&id).cloned().expect("just inserted");
        self.push_audit(who, now, "author", &id, None, Some(after.view()));
        Ok(after)
    }

    /// Folds `draft` into the most similar active entry when their
    /// conditions are at least `threshold` similar, else creates it.
    ///
    /// Merging a source that an entry already carries changes nothing, which
    /// makes re-distillation idempotent.
    pub fn merge_or_create(
        &mut self,
        gw: &Gateway,
        mut draft: KcaDraft,
        threshold: f64,
        who: &str,
        now: DateTime<Utc>,
    ) -> Result<MergeOutcome, MemoryError> {
        let cond = match draft.condition_embedding.take() {
            Some(v) => v,
            None => self.embed(gw, &draft.condition)?,
        };
        self.check_dim(&cond)?;
        let best = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.active)
            .map(|(i, e)| (i, cosine(&cond.values, &e.condition_embedding.values)))
            .filter(|(_, s)| *s >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        if let Some((idx, _)) = best {
            let id = self.entries[idx].kca_id.clone();
            if !self.entries[idx].has_source(&draft.source_ref) {
                let before = self.entries[idx].view();
                let e = &mut self.entries[idx];
                e.merged_sources.push(draft.source_ref.clone());
                e.updated_at = now;
                let after = e.view();
                self.push_audit(who, now, "merge", &id, Some(before), Some(after));
            }
            return Ok(MergeOutcome::Merged(id));
        }
        draft.condition_embedding = Some(cond);
        let id = self.upsert(gw, draft, now)?;
        let after = self.get(&id).expect("just inserted").view();
        self.push_audit(who, now, "create", &id, None, Some(after));
        Ok(MergeOutcome::Created(id))
    }

    fn push_audit(
        &mut self,
        who: &str,
        when: DateTime<Utc>,
        op: &str,
        id: &str,
        before: Option<serde_json::Value>,
        after: Option<serde_json::Value>,
    ) {
        self.audit.push(AuditRecord {
            seq: self.audit.len() as u64 + 1,
            who: who.to_string(),
            when,
            op: op.to_string(),
            kca_id: id.to_string(),
            before,
            after,
        });
    }

    pub fn bump_retrieved(&mut self, ids: &[String]) {
        for e in self.entries.iter_mut().filter(|e| ids.contains(&e.kca_id)) {
            e.stats.times_retrieved += 1;
        }
    }

    pub fn bump_recommended(&mut self, id: &str) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.kca_id == id) {
            e.stats.times_recommended += 1;
        }
    }

    pub fn bump_confirmed(&mut self, id: &str) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.kca_id == id) {
            e.stats.times_confirmed += 1;
        }
    }

    pub fn bump_rejected(&mut self, id: &str) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.kca_id == id) {
            e.stats.times_rejected += 1;
        }
    }

    /// Embeds the query texts and ranks active entries.
    pub fn retrieve(
        &self,
        gw: &Gateway,
        q: &KcaQuery,
        k: usize,
    ) -> Result<Vec<(KcaEntry, f64)>, MemoryError> {
        let key_text = q.key_text.as_deref().filter(|s| !s.trim().is_empty());
        let cond_text = q.condition_text.as_deref().filter(|s| !s.trim().is_empty());
        if key_text.is_none() && cond_text.is_none() {
            return Err(MemoryError::Invalid(
                "query needs key_text or condition_text".into(),
            ));
        }
        if k == 0 {
            return Err(MemoryError::Invalid("k must be at least 1".into()));
        }
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        let qk = key_text.map(|t| self.embed(gw, t)).transpose()?;
        let qc = cond_text.map(|t| self.embed(gw, t)).transpose()?;
        Ok(self
            .rank(
                qk.as_ref().map(|v| v.values.as_slice()),
                qc.as_ref().map(|v| v.values.as_slice()),
                k,
            )
            .into_iter()
            .map(|(i, s)| (self.entries[i].clone(), s))
            .collect())
    }

    fn combined(&self, ks: f64, cs: f64) -> f64 {
        self.key_weight * ks + (1.0 - self.key_weight) * cs
    }

    /// Ranks active entries against pre-embedded query vectors. Returns
    /// `(index, score)` pairs, score descending, ties by `kca_id` ascending.
    ///
    /// With both fields present, candidates are the union of the top `2k`
    /// by key and the top `2k` by condition. The pool is widened until the
    /// k-th combined score strictly beats the best score any entry outside
    /// the pool could reach, so the result always equals a full scan.
    pub fn rank(&self, qk: Option<&[f64]>, qc: Option<&[f64]>, k: usize) -> Vec<(usize, f64)> {
        let active: Vec<usize> = (0..self.entries.len())
            .filter(|&i| self.entries[i].active)
            .collect();
        if active.is_empty() || k == 0 {
            return Vec::new();
        }
        let by_id = |a: usize, b: usize| self.entries[a].kca_id.cmp(&self.entries[b].kca_id);
        let order = |x: &(usize, f64), y: &(usize, f64)| -> Ordering {
            y.1.total_cmp(&x.1).then_with(|| by_id(x.0, y.0))
        };
        let single = |q: &[f64], cond: bool| -> Vec<(usize, f64)> {
            let mut scored: Vec<(usize, f64)> = active
                .iter()
                .map(|&i| {
                    let e = &self.entries[i];
                    let v = if cond {
                        &e.condition_embedding
                    } else {
                        &e.key_embedding
                    };
                    (i, cosine(q, &v.values))
                })
                .collect();
            scored.sort_by(order);
            scored
        };
        match (qk, qc) {
            (None, None) => Vec::new(),
            (Some(q), None) => single(q, false).into_iter().take(k).collect(),
            (None, Some(q)) => single(q, true).into_iter().take(k).collect(),
            (Some(qk), Some(qc)) => {
                let by_key = single(qk, false);
                let by_cond = single(qc, true);
                let key_score: std::collections::HashMap<usize, f64> =
                    by_key.iter().copied().collect();
                let cond_score: std::collections::HashMap<usize, f64> =
                    by_cond.iter().copied().collect();
                let n = active.len();
                let mut depth = (2 * k).min(n);
                loop {
                    let pool: BTreeSet<usize> = by_key[..depth]
                        .iter()
                        .chain(&by_cond[..depth])
                        .map(|(i, _)| *i)
                        .collect();
                    let mut scored: Vec<(usize, f64)> = pool
                        .iter()
                        .map(|&i| (i, self.combined(key_score[&i], cond_score[&i])))
                        .collect();
                    scored.sort_by(order);
                    scored.truncate(k);
                    if depth >= n || pool.len() >= n {
                        return scored;
                    }
                    let bound = self.combined(by_key[depth - 1].1, by_cond[depth - 1].1);
                    if scored.len() == k && scored[k - 1].1 > bound {
                        return scored;
                    }
                    depth = (depth * 2).min(n);
                }
            }
        }
    }

    /// Writes the versioned snapshot atomically.
    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&StoreHeader {
            format: STORE_FORMAT,
            embedding_dim: self.dim,
            provider_id: self.provider_id.clone(),
        })?);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        write_atomic(path, &out)
    }

    /// Loads a snapshot written by [`KcaStore::save`].
    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header: StoreHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?)?,
            None => return Err(MemoryError::Format("kca store is empty".into())),
        };
        if header.format != STORE_FORMAT {
            return Err(MemoryError::Format(format!(
                "unsupported format {}",
                header.format
            )));
        }
        let mut store = Self::new(header.embedding_dim, header.provider_id);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: KcaEntry = serde_json::from_str(&line)?;
            store.check_dim(&e.key_embedding)?;
            store.check_dim(&e.condition_embedding)?;
            store.entries.push(e);
        }
        store.entries.sort_by(|a, b| a.kca_id.cmp(&b.kca_id));
        store.next_id = store
            .entries
            .iter()
            .filter_map(|e| e.kca_id.strip_prefix("kca-")?.parse::<u64>().ok())
            .max()
            .unwrap_or(0)
            + 1;
        Ok(store)
    }

    /// Appends audit records with `seq > after_seq` to `path`.
    pub fn append_audit(&self, path: &Path, after_seq: u64) -> Result<u64, MemoryError> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let mut last = after_seq;
        for r in self.audit.iter().filter(|r| r.seq > after_seq) {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
            last = r.seq;
        }
        Ok(last)
    }

    /// Restores the audit trail so new records continue its numbering.
    pub fn load_audit(&mut self, path: &Path) -> Result<(), MemoryError> {
        if !path.exists() {
            return Ok(());
        }
        let reader = BufReader::new(fs::File::open(path)?);
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                self.audit.push(serde_json::from_str(&line)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn write_atomic(path: &Path, contents: &str) -> Result<(), MemoryError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(tmp, path)?;
    Ok(())
}
