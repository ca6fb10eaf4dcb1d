//! Append-only pipeline event log.
//!
//! Entries serialize one JSON object per line with fields in a fixed order
//! (`seq`, `stage`, `event`, `payload`, `parent_refs`). Payload maps are
//! key-sorted and floats use shortest round-trip formatting, so identical
//! runs produce byte-identical logs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ensemble,
    Gate,
    Prune,
    Anchor,
    Audit,
    Synthesize,
    Facts,
}

pub type Payload = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLogEntry {
    pub seq: u64,
    pub stage: Stage,
    pub event: String,
    pub payload: Payload,
    pub parent_refs: Vec<String>,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: sequence {got} does not follow {prev}")]
    Sequence { line: usize, prev: u64, got: u64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditLog {
    entries: Vec<AuditLogEntry>,
}

/// Builds a payload from `(key, value)` pairs.
pub fn payload<I, K>(pairs: I) -> Payload
where
    I: IntoIterator<Item = (K, Value)>,
    K: Into<String>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v)).collect()
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an event and returns its sequence number (starting at 1).
    pub fn append(
        &mut self,
        stage: Stage,
        event: impl Into<String>,
        payload: Payload,
        parent_refs: Vec<String>,
    ) -> u64 {
        let seq = self.entries.last().map_or(1, |e| e.seq + 1);
        self.entries.push(AuditLogEntry {
            seq,
            stage,
            event: event.into(),
            payload,
            parent_refs,
        });
        seq
    }

    pub fn entries(&self) -> &[AuditLogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_stage(&self, stage: Stage) -> usize {
        self.entries.iter().filter(|e| e.stage == stage).count()
    }

    pub fn events<'a>(&'a self, event: &'a str) -> impl Iterator<Item = &'a AuditLogEntry> + 'a {
        self.entries.iter().filter(move |e| e.event == event)
    }

    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self, LogError> {
        let mut log = AuditLog::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: AuditLogEntry = serde_json::from_str(line).map_err(|e| LogError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let prev = log.entries.last().map_or(0, |e| e.seq);
            if entry.seq <= prev {
                return Err(LogError::Sequence {
                    line: i + 1,
                    prev,
                    got: entry.seq,
                });
            }
            log.entries.push(entry);
        }
        Ok(log)
    }
}
