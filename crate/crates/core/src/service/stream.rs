//! Ordered, resumable per-incident record stream.

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use tokio::sync::watch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    CriticalEvent,
    Recommendation,
    FeedbackAck,
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub seq: u64,
    pub kind: StreamKind,
    /// Incident time the record refers to.
    pub ts: DateTime<Utc>,
    pub body: serde_json::Value,
}

/// Outcome of offering a record while a recovery pass is replaying.
#[derive(Debug, Clone, PartialEq)]
pub enum Offer {
    Appended(StreamRecord),
    /// The record was already persisted; `matches` tells whether the
    /// recomputed content agreed with it.
    Replayed {
        persisted: StreamRecord,
        matches: bool,
    },
}

struct Inner {
    records: Vec<StreamRecord>,
    file: Option<File>,
    /// Records before this index came from disk and have not yet been
    /// re-derived by recovery.
    replay_cursor: usize,
}

/// Append-only log with a dense `seq` starting at 1. Readers never block
/// writers for longer than a clone of the tail.
pub struct StreamLog {
    inner: Mutex<Inner>,
    path: Option<PathBuf>,
    notify: watch::Sender<u64>,
}

impl std::fmt::Debug for StreamLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StreamLog")
            .field("path", &self.path)
            .field("last_seq", &self.last_seq())
            .finish()
    }
}

impl StreamLog {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                records: Vec::new(),
                file: None,
                replay_cursor: 0,
            }),
            path: None,
            notify: watch::channel(0).0,
        }
    }

    /// Opens (or creates) a persisted stream. Existing records become
    /// visible immediately and are expected to be re-derived, in order, by
    /// a recovery pass through [`StreamLog::offer`].
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<StreamRecord>(&line) {
                    Ok(r) if r.seq == records.len() as u64 + 1 => records.push(r),
                    // A torn final line from a crash mid-write is dropped.
                    _ => {
                        tracing::warn!(line = i + 1, path = %path.display(), "discarding unreadable stream tail");
                        break;
                    }
                }
            }
            rewrite(path, &records)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let last = records.len() as u64;
        Ok(Self {
            inner: Mutex::new(Inner {
                records,
                file: Some(file),
                replay_cursor: 0,
            }),
            path: Some(path.to_path_buf()),
            notify: watch::channel(last).0,
        })
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().records.len() as u64
    }

    /// Records with `seq > from_seq`, in order.
    pub fn from_seq(&self, from_seq: u64) -> Vec<StreamRecord> {
        let inner = self.inner.lock();
        let start = (from_seq as usize).min(inner.records.len());
        inner.records[start..].to_vec()
    }

    pub fn subscribe(&self) -> watch::Receiver<u64> {
        self.notify.subscribe()
    }

    /// Next persisted record a recovery pass has not re-derived yet.
    pub fn peek_replay(&self) -> Option<StreamRecord> {
        let inner = self.inner.lock();
        inner.records.get(inner.replay_cursor).cloned()
    }

    pub fn replaying(&self) -> bool {
        let inner = self.inner.lock();
        inner.replay_cursor < inner.records.len()
    }

    /// Appends a record, unless recovery is still walking persisted
    /// records, in which case the persisted one is consumed instead.
    pub fn offer(
        &self,
        kind: StreamKind,
        ts: DateTime<Utc>,
        body: serde_json::Value,
    ) -> std::io::Result<Offer> {
        let mut inner = self.inner.lock();
        if inner.replay_cursor < inner.records.len() {
            let persisted = inner.records[inner.replay_cursor].clone();
            inner.replay_cursor += 1;
            let matches = persisted.kind == kind && persisted.ts == ts && persisted.body == body;
            return Ok(Offer::Replayed { persisted, matches });
        }
        let record = StreamRecord {
            seq: inner.records.len() as u64 + 1,
            kind,
            ts,
            body,
        };
        if let Some(file) = inner.file.as_mut() {
            let line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
            writeln!(file, "{line}")?;
            file.flush()?;
        }
        inner.records.push(record.clone());
        inner.replay_cursor = inner.records.len();
        let seq = record.seq;
        drop(inner);
        self.notify.send_replace(seq);
        Ok(Offer::Appended(record))
    }

    /// Ends recovery. Persisted records that recovery never re-derived stay
    /// in the log; the count is returned so the caller can report it.
    pub fn finish_replay(&self) -> usize {
        let mut inner = self.inner.lock();
        let left = inner.records.len() - inner.replay_cursor;
        inner.replay_cursor = inner.records.len();
        left
    }
}

fn rewrite(path: &Path, records: &[StreamRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(tmp, path)
}
