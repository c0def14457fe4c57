use super::{CompletionRequest, PromptSection, PromptTrace};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// One line of an incident's prompt log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rec_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub schema_hint: Option<String>,
    pub sections: Vec<PromptSection>,
    pub response: String,
}

/// Append-only JSONL prompt log for one incident.
///
/// Reopening an existing file continues its numbering. Records already on
/// disk are not loaded back into memory.
#[derive(Debug, Default)]
pub struct PromptLog {
    path: Option<PathBuf>,
    file: Option<File>,
    next_seq: u64,
    records: Vec<PromptRecord>,
}

impl PromptLog {
    pub fn in_memory() -> Self {
        Self {
            next_seq: 1,
            ..Self::default()
        }
    }

    pub fn open(path: &Path) -> std::io::Result<Self> {
        let persisted = if path.exists() {
            BufReader::new(File::open(path)?).lines().count() as u64
        } else {
            0
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            file: Some(file),
            next_seq: persisted + 1,
            records: Vec::new(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub(super) fn append(
        &mut self,
        trace: &PromptTrace,
        req: &CompletionRequest,
        response: &str,
    ) -> std::io::Result<()> {
        let record = PromptRecord {
            seq: self.next_seq,
            timestamp: trace.ts,
            rec_id: trace.rec_id.clone(),
            schema_hint: req.schema_hint.map(|s| s.as_str().to_string()),
            sections: req.prompt_sections.clone(),
            response: response.to_string(),
        };
        self.next_seq += 1;
        if let Some(file) = self.file.as_mut() {
            let line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
            writeln!(file, "{line}")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("prompt record serializes"));
            out.push('\n');
        }
        out
    }
}
