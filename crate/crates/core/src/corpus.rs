//! Action records and the on-disk action store.
//!
//! A corpus is a JSON-lines file with one action per line. Entities have no
//! records of their own: they are materialized from the references carried by
//! actions when the store is indexed.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Epoch milliseconds, UTC.
pub type Millis = i64;

pub const MILLIS_PER_HOUR: f64 = 3_600_000.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record{} at byte {offset}: {reason}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    MalformedRecord {
        line: Option<usize>,
        offset: usize,
        reason: String,
    },
    #[error("duplicate action id {id:?} on line {line}")]
    DuplicateActionId { id: String, line: usize },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A link from an action to an entity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityRef {
    pub entity_type: String,
    pub entity_id: String,
    pub relationship: String,
}

impl EntityRef {
    pub fn new(
        entity_type: impl Into<String>,
        entity_id: impl Into<String>,
        relationship: impl Into<String>,
    ) -> Self {
        Self {
            entity_type: entity_type.into(),
            entity_id: entity_id.into(),
            relationship: relationship.into(),
        }
    }

    pub fn key(&self) -> EntityKey {
        EntityKey::new(&self.entity_type, &self.entity_id)
    }
}

/// Global identity of an entity: `(entity_type, entity_id)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityKey {
    pub entity_type: String,
    pub entity_id: String,
}

impl EntityKey {
    pub fn new(entity_type: impl Into<String>, entity_id: impl Into<String>) -> Self {
        Self {
            entity_type: entity_type.into(),
            entity_id: entity_id.into(),
        }
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.entity_type, self.entity_id)
    }
}

/// One logged action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRecord {
    pub id: String,
    #[serde(rename = "type")]
    pub action_type: String,
    pub start_ms: Millis,
    pub end_ms: Millis,
    pub refs: Vec<EntityRef>,
}

impl ActionRecord {
    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.action_type.is_empty() {
            return Err(format!("action {:?}: empty type", self.id));
        }
        if self.start_ms > self.end_ms {
            return Err(format!(
                "action {:?}: start_ms {} after end_ms {}",
                self.id, self.start_ms, self.end_ms
            ));
        }
        if self.refs.is_empty() {
            return Err(format!("action {:?}: empty refs", self.id));
        }
        let mut seen = HashSet::with_capacity(self.refs.len());
        for r in &self.refs {
            if r.entity_type.is_empty() || r.entity_id.is_empty() || r.relationship.is_empty() {
                return Err(format!("action {:?}: reference with empty field", self.id));
            }
            if !seen.insert(r) {
                return Err(format!(
                    "action {:?}: duplicate reference {}/{}/{}",
                    self.id, r.entity_type, r.entity_id, r.relationship
                ));
            }
        }
        Ok(())
    }

    pub fn references(&self, key: &EntityKey) -> bool {
        self.refs
            .iter()
            .any(|r| r.entity_type == key.entity_type && r.entity_id == key.entity_id)
    }

    /// Hours from `origin_ms` to this action's start; negative when earlier.
    pub fn delta_hours(&self, origin_ms: Millis) -> f64 {
        (self.start_ms - origin_ms) as f64 / MILLIS_PER_HOUR
    }

    pub fn duration_hours(&self) -> f64 {
        (self.end_ms - self.start_ms) as f64 / MILLIS_PER_HOUR
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("action records always serialize")
    }
}

/// Parses one corpus line. Error offsets are relative to the start of `line`.
pub fn parse_action_record(line: &str) -> Result<ActionRecord, CorpusError> {
    let record: ActionRecord =
        serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
            line: None,
            offset: e.column().saturating_sub(1),
            reason: e.to_string(),
        })?;
    record
        .validate()
        .map_err(|reason| CorpusError::MalformedRecord {
            line: None,
            offset: 0,
            reason,
        })?;
    Ok(record)
}

/// Position of an action inside an [`ActionStore`].
pub(crate) type ActionIdx = usize;

/// Immutable, indexed set of action records.
#[derive(Debug, Default)]
pub struct ActionStore {
    actions: Vec<ActionRecord>,
    by_id: HashMap<String, ActionIdx>,
    // entity -> action type -> actions sorted by (start, id)
    entity_index: HashMap<EntityKey, BTreeMap<String, Vec<ActionIdx>>>,
}

impl ActionStore {
    /// Builds the store, rejecting duplicate ids. Records are validated.
    pub fn from_records(records: Vec<ActionRecord>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|reason| CorpusError::MalformedRecord {
                line: Some(i + 1),
                offset: 0,
                reason,
            })?;
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateActionId {
                    id: r.id.clone(),
                    line: i + 1,
                });
            }
        }
        let mut entity_index: HashMap<EntityKey, BTreeMap<String, Vec<ActionIdx>>> =
            HashMap::new();
        for (i, r) in records.iter().enumerate() {
            // An action may reference one entity under several relationships.
            let keys: BTreeSet<EntityKey> = r.refs.iter().map(EntityRef::key).collect();
            for key in keys {
                entity_index
                    .entry(key)
                    .or_default()
                    .entry(r.action_type.clone())
                    .or_default()
                    .push(i);
            }
        }
        for per_type in entity_index.values_mut() {
            for list in per_type.values_mut() {
                list.sort_by(|&a, &b| {
                    let (ra, rb) = (&records[a], &records[b]);
                    (ra.start_ms, &ra.id).cmp(&(rb.start_ms, &rb.id))
                });
            }
        }
        Ok(Self {
            actions: records,
            by_id,
            entity_index,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ActionRecord> {
        self.by_id.get(id).map(|&i| &self.actions[i])
    }

    /// Records in load order.
    pub fn iter(&self) -> impl Iterator<Item = &ActionRecord> {
        self.actions.iter()
    }

    pub fn entity_count(&self) -> usize {
        self.entity_index.len()
    }

    /// Action types under which `key` is referenced, in lexicographic order.
    pub fn action_types_for(&self, key: &EntityKey) -> impl Iterator<Item = &str> {
        self.entity_index
            .get(key)
            .into_iter()
            .flat_map(|m| m.keys().map(String::as_str))
    }

    /// Ids of actions of `action_type` referencing `key`, sorted by (start, id).
    pub fn lookup(&self, key: &EntityKey, action_type: &str) -> Vec<&str> {
        self.slot(key, action_type)
            .iter()
            .map(|&i| self.actions[i].id.as_str())
            .collect()
    }

    pub(crate) fn record(&self, idx: ActionIdx) -> &ActionRecord {
        &self.actions[idx]
    }

    pub(crate) fn index_of(&self, id: &str) -> Option<ActionIdx> {
        self.by_id.get(id).copied()
    }

    pub(crate) fn slots(&self, key: &EntityKey) -> Option<&BTreeMap<String, Vec<ActionIdx>>> {
        self.entity_index.get(key)
    }

    pub(crate) fn slot(&self, key: &EntityKey, action_type: &str) -> &[ActionIdx] {
        self.entity_index
            .get(key)
            .and_then(|m| m.get(action_type))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Reads and indexes a JSON-lines corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<ActionStore, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut buf = String::new();
    let mut line_no = 0usize;
    let mut file_offset = 0usize;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line = buf.trim_end_matches(['\n', '\r']);
        if !line.trim().is_empty() {
            let record = parse_action_record(line).map_err(|e| match e {
                CorpusError::MalformedRecord { offset, reason, .. } => {
                    CorpusError::MalformedRecord {
                        line: Some(line_no),
                        offset: file_offset + offset,
                        reason,
                    }
                }
                other => other,
            })?;
            if seen.insert(record.id.clone(), line_no).is_some() {
                return Err(CorpusError::DuplicateActionId {
                    id: record.id,
                    line: line_no,
                });
            }
            records.push(record);
        }
        file_offset += n;
    }
    ActionStore::from_records(records)
}

/// Writes records as JSON lines.
pub fn write_corpus<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a ActionRecord>,
) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        writeln!(out, "{}", r.to_json_line()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Ids of the actions whose type is sensitive, sorted by (start, id).
pub fn select_roots(store: &ActionStore, sensitive_types: &BTreeSet<String>) -> Vec<String> {
    let mut roots: Vec<&ActionRecord> = store
        .iter()
        .filter(|r| sensitive_types.contains(&r.action_type))
        .collect();
    roots.sort_by(|a, b| (a.start_ms, &a.id).cmp(&(b.start_ms, &b.id)));
    roots.into_iter().map(|r| r.id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG1_ROOT: &str = r#"{"id":"q1","type":"DataTool.Query","start_ms":0,"end_ms":60000,"refs":[{"entity_type":"agent","entity_id":"agent.1","relationship":"actor"},{"entity_type":"user","entity_id":"user.1","relationship":"subject"}]}"#;

    fn record(id: &str, ty: &str, start: Millis, refs: &[(&str, &str)]) -> ActionRecord {
        ActionRecord {
            id: id.into(),
            action_type: ty.into(),
            start_ms: start,
            end_ms: start,
            refs: refs
                .iter()
                .map(|(t, i)| EntityRef::new(*t, *i, "rel"))
                .collect(),
        }
    }

    #[test]
    fn parses_figure_root() {
        let r = parse_action_record(FIG1_ROOT).unwrap();
        assert_eq!(r.action_type, "DataTool.Query");
        assert_eq!(r.refs.len(), 2);
        assert_eq!(r.refs[1].key(), EntityKey::new("user", "user.1"));
    }

    #[test]
    fn zero_duration_is_valid() {
        let line = r#"{"id":"a","type":"X.Y","start_ms":5,"end_ms":5,"refs":[{"entity_type":"agent","entity_id":"a1","relationship":"actor"}]}"#;
        let r = parse_action_record(line).unwrap();
        assert_eq!(r.duration_hours(), 0.0);
    }

    #[test]
    fn rejects_bad_records() {
        let cases = [
            r#"{"id":"a","type":"X","start_ms":0,"end_ms":1,"refs":[]}"#,
            r#"{"id":"a","type":"X","start_ms":2,"end_ms":1,"refs":[{"entity_type":"u","entity_id":"1","relationship":"r"}]}"#,
            r#"{"id":"a","type":"X","start_ms":0,"end_ms":1}"#,
            r#"{"id":"a","type":"X","start_ms":0,"end_ms":1,"refs":[{"entity_type":"u","entity_id":"1","relationship":"r"}],"extra":1}"#,
            r#"{"id":"a","type":"X","start_ms":0,"end_ms":1,"refs":[{"entity_type":"u","entity_id":"1","relationship":"r"},{"entity_type":"u","entity_id":"1","relationship":"r"}]}"#,
            r#"{"id":"a","type":"X","start_ms":0,"end_ms":1,"refs":[{"entity_type":"","entity_id":"1","relationship":"r"}]}"#,
            r#"{"id":"a","type":"X","start_ms":"0","end_ms":1,"refs":[{"entity_type":"u","entity_id":"1","relationship":"r"}]}"#,
            r#"{"id":"a""#,
        ];
        for case in cases {
            match parse_action_record(case) {
                Err(CorpusError::MalformedRecord { .. }) => {}
                other => panic!("{case}: expected MalformedRecord, got {other:?}"),
            }
        }
    }

    #[test]
    fn syntax_error_reports_offset() {
        let err = parse_action_record(r#"{"id": x}"#).unwrap_err();
        match err {
            CorpusError::MalformedRecord { offset, .. } => assert_eq!(offset, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_reports_line_and_file_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let good = record("a", "T", 0, &[("u", "1")]).to_json_line();
        std::fs::write(&path, format!("{good}\n{{\"id\": x}}\n")).unwrap();
        match load_corpus(&path).unwrap_err() {
            CorpusError::MalformedRecord { line, offset, .. } => {
                assert_eq!(line, Some(2));
                assert_eq!(offset, good.len() + 1 + 7);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        let store = load_corpus(&path).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.entity_count(), 0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let a = record("a", "T", 0, &[("u", "1")]);
        write_corpus(&path, [&a, &a]).unwrap();
        match load_corpus(&path).unwrap_err() {
            CorpusError::DuplicateActionId { id, line } => {
                assert_eq!(id, "a");
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shared_entity_lists_both_actions() {
        let store = ActionStore::from_records(vec![
            record("b", "T", 10, &[("user", "u1"), ("agent", "x")]),
            record("a", "T", 10, &[("user", "u1")]),
            record("c", "S", 5, &[("user", "u1")]),
        ])
        .unwrap();
        let key = EntityKey::new("user", "u1");
        assert_eq!(store.lookup(&key, "T"), vec!["a", "b"]);
        assert_eq!(store.lookup(&key, "S"), vec!["c"]);
        assert_eq!(store.action_types_for(&key).collect::<Vec<_>>(), ["S", "T"]);
    }

    #[test]
    fn select_roots_filters_and_orders() {
        let store = ActionStore::from_records(vec![
            record("q2", "DataTool.Query", 30, &[("u", "1")]),
            record("v1", "TicketManagement.View", 1, &[("u", "1")]),
            record("q1", "DataTool.Query", 30, &[("u", "2")]),
            record("q0", "DataTool.Query", 3, &[("u", "2")]),
            record("v2", "TicketManagement.View", 2, &[("u", "1")]),
        ])
        .unwrap();
        assert!(select_roots(&store, &BTreeSet::new()).is_empty());
        let sensitive = BTreeSet::from(["DataTool.Query".to_string()]);
        assert_eq!(select_roots(&store, &sensitive), ["q0", "q1", "q2"]);
    }
}
