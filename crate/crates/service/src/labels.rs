use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    WorthAuditing,
    NotWorthAuditing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLabel {
    pub subgraph_id: String,
    pub verdict: Verdict,
    pub auditor: String,
    pub at: DateTime<Utc>,
}

/// Label history plus the active verdict of every (subgraph, auditor).
/// A later label from the same auditor replaces the earlier one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelBook {
    history: Vec<AuditLabel>,
    /// (subgraph, auditor) to index into `history`.
    active: BTreeMap<(String, String), usize>,
}

impl LabelBook {
    pub fn apply(&mut self, label: AuditLabel) {
        let key = (label.subgraph_id.clone(), label.auditor.clone());
        self.history.push(label);
        self.active.insert(key, self.history.len() - 1);
    }

    pub fn history(&self) -> &[AuditLabel] {
        &self.history
    }

    /// Active verdicts on `id`, by auditor.
    pub fn verdicts(&self, id: &str) -> Vec<(&str, Verdict)> {
        self.active
            .range((id.to_string(), String::new())..)
            .take_while(|((s, _), _)| s == id)
            .map(|((_, a), &i)| (a.as_str(), self.history[i].verdict))
            .collect()
    }

    /// Combined verdict on `id`: worth auditing if any auditor says so.
    pub fn status(&self, id: &str) -> Option<Verdict> {
        let v = self.verdicts(id);
        if v.is_empty() {
            None
        } else if v.iter().any(|(_, v)| *v == Verdict::WorthAuditing) {
            Some(Verdict::WorthAuditing)
        } else {
            Some(Verdict::NotWorthAuditing)
        }
    }

    pub fn is_labeled(&self, id: &str) -> bool {
        !self.verdicts(id).is_empty()
    }

    /// Ids with an active verdict and their combined verdict.
    pub fn labeled(&self) -> BTreeMap<&str, Verdict> {
        let mut out = BTreeMap::new();
        for ((id, _), &i) in &self.active {
            let v = self.history[i].verdict;
            let e = out.entry(id.as_str()).or_insert(v);
            if v == Verdict::WorthAuditing {
                *e = v;
            }
        }
        out
    }

    /// Ids whose combined verdict is worth auditing, ordered by the label
    /// that made them so.
    pub fn worth_auditing(&self) -> Vec<String> {
        let mut firsts: BTreeMap<&str, usize> = BTreeMap::new();
        for &i in self.active.values() {
            let l = &self.history[i];
            if l.verdict == Verdict::WorthAuditing {
                let e = firsts.entry(l.subgraph_id.as_str()).or_insert(i);
                *e = (*e).min(i);
            }
        }
        let mut ids: Vec<(usize, &str)> = firsts.into_iter().map(|(id, i)| (i, id)).collect();
        ids.sort();
        ids.into_iter().map(|(_, id)| id.to_string()).collect()
    }
}

/// Append-only JSON-lines label file.
#[derive(Debug, Clone)]
pub struct LabelLog {
    path: PathBuf,
}

impl LabelLog {
    pub fn new(path: PathBuf) -> Self {
        Self { path }
    }

    /// Replays the log. A missing file is an empty log.
    pub fn replay(&self) -> Result<LabelBook, ServiceError> {
        let mut book = LabelBook::default();
        let text = match std::fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(book),
            Err(e) => return Err(ServiceError::startup(&self.path, e)),
        };
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let label: AuditLabel = serde_json::from_str(line)
                .map_err(|e| ServiceError::startup(&self.path, format!("line {}: {e}", n + 1)))?;
            book.apply(label);
        }
        Ok(book)
    }

    /// Appends one label as a single write and syncs it to disk.
    pub fn append(&self, label: &AuditLabel) -> std::io::Result<()> {
        let mut line = serde_json::to_string(label)?;
        line.push('\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
