use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ActionRecord, EntityKey, Millis};
use crate::ranking::MutationKind;

#[derive(Debug, Error)]
pub enum SubgraphError {
    #[error("subgraph {root}: {reason}")]
    Invalid { root: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgraphEntity {
    pub entity_type: String,
    pub entity_id: String,
    pub step: u32,
}

impl SubgraphEntity {
    pub fn key(&self) -> EntityKey {
        EntityKey::new(&self.entity_type, &self.entity_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgraphEdge {
    pub action_id: String,
    pub entity_type: String,
    pub entity_id: String,
    pub relationship: String,
}

/// Bipartite neighborhood of a root action.
///
/// Actions are kept sorted by `(start, id)`, entities by key and edges
/// lexicographically, so two subgraphs with the same content compare equal
/// and serialize identically regardless of how they were assembled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootedSubgraph {
    pub root_id: String,
    pub agent_id: String,
    pub day: NaiveDate,
    pub actions: Vec<ActionRecord>,
    pub entities: Vec<SubgraphEntity>,
    pub edges: Vec<SubgraphEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutation: Option<MutationKind>,
}

/// UTC calendar day containing `ms`.
pub fn utc_day(ms: Millis) -> NaiveDate {
    chrono::DateTime::from_timestamp_millis(ms)
        .expect("timestamp within chrono range")
        .date_naive()
}

impl RootedSubgraph {
    /// Assembles a subgraph from its actions and entity steps. Edges are
    /// derived from the action references whose entity is present.
    pub fn assemble(
        root: &ActionRecord,
        agent_entity_type: &str,
        actions: Vec<ActionRecord>,
        steps: BTreeMap<EntityKey, u32>,
    ) -> Self {
        let agent_id = root
            .refs
            .iter()
            .filter(|r| r.entity_type == agent_entity_type)
            .map(|r| r.entity_id.as_str())
            .min()
            .unwrap_or_default()
            .to_string();
        let mut g = Self {
            root_id: root.id.clone(),
            agent_id,
            day: utc_day(root.start_ms),
            actions,
            entities: steps
                .into_iter()
                .map(|(k, step)| SubgraphEntity {
                    entity_type: k.entity_type,
                    entity_id: k.entity_id,
                    step,
                })
                .collect(),
            edges: Vec::new(),
            mutation: None,
        };
        g.rebuild_edges();
        g
    }

    pub fn root(&self) -> &ActionRecord {
        self.actions
            .iter()
            .find(|a| a.id == self.root_id)
            .expect("root action present")
    }

    pub fn root_start(&self) -> Millis {
        self.root().start_ms
    }

    pub fn action(&self, id: &str) -> Option<&ActionRecord> {
        self.actions.iter().find(|a| a.id == id)
    }

    pub fn entity_step(&self, key: &EntityKey) -> Option<u32> {
        self.entities
            .iter()
            .find(|e| e.entity_type == key.entity_type && e.entity_id == key.entity_id)
            .map(|e| e.step)
    }

    pub fn max_step(&self) -> u32 {
        self.entities.iter().map(|e| e.step).max().unwrap_or(0)
    }

    /// Sorts actions, entities and edges into canonical order and
    /// regenerates the edge set.
    pub fn rebuild_edges(&mut self) {
        self.actions
            .sort_by(|a, b| (a.start_ms, &a.id).cmp(&(b.start_ms, &b.id)));
        self.entities.sort();
        let present: BTreeSet<EntityKey> = self.entities.iter().map(SubgraphEntity::key).collect();
        let mut edges: Vec<SubgraphEdge> = self
            .actions
            .iter()
            .flat_map(|a| {
                a.refs.iter().filter(|r| present.contains(&r.key())).map(|r| SubgraphEdge {
                    action_id: a.id.clone(),
                    entity_type: r.entity_type.clone(),
                    entity_id: r.entity_id.clone(),
                    relationship: r.relationship.clone(),
                })
            })
            .collect();
        edges.sort();
        edges.dedup();
        self.edges = edges;
    }

    /// Recomputes entity steps as breadth-first distance from the root,
    /// drops entities farther than `max_step`, and drops whatever is no
    /// longer reachable. Used after structural edits.
    pub fn reachable_restrict(&mut self, max_step: u32) {
        let candidates: BTreeSet<EntityKey> =
            self.entities.iter().map(SubgraphEntity::key).collect();
        let by_id: HashMap<&str, &ActionRecord> =
            self.actions.iter().map(|a| (a.id.as_str(), a)).collect();
        let mut entity_actions: HashMap<EntityKey, Vec<&str>> = HashMap::new();
        for a in &self.actions {
            for r in &a.refs {
                let k = r.key();
                if candidates.contains(&k) {
                    entity_actions.entry(k).or_default().push(a.id.as_str());
                }
            }
        }
        let root = by_id[self.root_id.as_str()];
        let mut steps: BTreeMap<EntityKey, u32> = BTreeMap::new();
        let mut kept_actions: BTreeSet<&str> = BTreeSet::from([root.id.as_str()]);
        let mut queue = VecDeque::new();
        for r in &root.refs {
            let k = r.key();
            if candidates.contains(&k) && !steps.contains_key(&k) {
                steps.insert(k.clone(), 1);
                queue.push_back(k);
            }
        }
        while let Some(k) = queue.pop_front() {
            let s = steps[&k];
            for &aid in entity_actions.get(&k).map(Vec::as_slice).unwrap_or(&[]) {
                if !kept_actions.insert(aid) || s >= max_step {
                    continue;
                }
                for r in &by_id[aid].refs {
                    let nk = r.key();
                    if candidates.contains(&nk) && !steps.contains_key(&nk) {
                        steps.insert(nk.clone(), s + 1);
                        queue.push_back(nk);
                    }
                }
            }
        }
        let kept: BTreeSet<String> = kept_actions.into_iter().map(str::to_string).collect();
        self.actions.retain(|a| kept.contains(&a.id));
        self.entities = steps
            .into_iter()
            .map(|(k, step)| SubgraphEntity {
                entity_type: k.entity_type,
                entity_id: k.entity_id,
                step,
            })
            .collect();
        self.rebuild_edges();
    }

    /// Structural checks shared by sampled and mutated subgraphs.
    pub fn validate(&self, max_step: Option<u32>) -> Result<(), SubgraphError> {
        let fail = |reason: String| SubgraphError::Invalid {
            root: self.root_id.clone(),
            reason,
        };
        let mut action_ids = BTreeSet::new();
        for a in &self.actions {
            a.validate().map_err(&fail)?;
            if !action_ids.insert(a.id.as_str()) {
                return Err(fail(format!("duplicate action {}", a.id)));
            }
        }
        let root = self
            .actions
            .iter()
            .find(|a| a.id == self.root_id)
            .ok_or_else(|| fail("root action missing".into()))?;
        let mut steps = BTreeMap::new();
        for e in &self.entities {
            if steps.insert(e.key(), e.step).is_some() {
                return Err(fail(format!("duplicate entity {}", e.key())));
            }
            if e.step < 1 || max_step.is_some_and(|t| e.step > t) {
                return Err(fail(format!("entity {} has step {}", e.key(), e.step)));
            }
        }
        for r in &root.refs {
            if steps.get(&r.key()) != Some(&1) {
                return Err(fail(format!("root entity {} not at step 1", r.key())));
            }
        }
        let by_id: HashMap<&str, &ActionRecord> =
            self.actions.iter().map(|a| (a.id.as_str(), a)).collect();
        let mut expected = 0usize;
        for a in &self.actions {
            expected += a
                .refs
                .iter()
                .filter(|r| steps.contains_key(&r.key()))
                .count();
        }
        if expected != self.edges.len() {
            return Err(fail(format!(
                "{} edges, {} references to present entities",
                self.edges.len(),
                expected
            )));
        }
        let mut adjacency: HashMap<EntityKey, Vec<&str>> = HashMap::new();
        for e in &self.edges {
            let key = EntityKey::new(&e.entity_type, &e.entity_id);
            let action = by_id
                .get(e.action_id.as_str())
                .ok_or_else(|| fail(format!("edge from unknown action {}", e.action_id)))?;
            if !steps.contains_key(&key) {
                return Err(fail(format!("edge to unknown entity {key}")));
            }
            if !action.refs.iter().any(|r| {
                r.entity_type == e.entity_type
                    && r.entity_id == e.entity_id
                    && r.relationship == e.relationship
            }) {
                return Err(fail(format!("edge {}->{key} has no reference", e.action_id)));
            }
            adjacency.entry(key).or_default().push(e.action_id.as_str());
        }
        // Reachability from the root across the bipartite edges.
        let mut seen_actions = BTreeSet::from([root.id.as_str()]);
        let mut seen_entities = BTreeSet::new();
        let mut queue = VecDeque::from([root.id.as_str()]);
        while let Some(aid) = queue.pop_front() {
            for r in &by_id[aid].refs {
                let k = r.key();
                if !steps.contains_key(&k) || !seen_entities.insert(k.clone()) {
                    continue;
                }
                for &next in adjacency.get(&k).map(Vec::as_slice).unwrap_or(&[]) {
                    if seen_actions.insert(next) {
                        queue.push_back(next);
                    }
                }
            }
        }
        if seen_actions.len() != self.actions.len() || seen_entities.len() != steps.len() {
            return Err(fail("unreachable nodes".into()));
        }
        Ok(())
    }
}

/// File name used for a subgraph inside an output directory.
pub fn subgraph_file_name(root_id: &str) -> String {
    let mut name = String::with_capacity(root_id.len() + 5);
    for b in root_id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.' {
            name.push(b as char);
        } else {
            name.push_str(&format!("%{b:02X}"));
        }
    }
    name.push_str(".json");
    name
}

pub fn write_subgraphs(dir: &Path, subgraphs: &[RootedSubgraph]) -> Result<(), SubgraphError> {
    std::fs::create_dir_all(dir).map_err(|source| SubgraphError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for g in subgraphs {
        let path = dir.join(subgraph_file_name(&g.root_id));
        let io_err = |source| SubgraphError::Io {
            path: path.clone(),
            source,
        };
        let file = std::fs::File::create(&path).map_err(io_err)?;
        let mut out = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut out, g).map_err(|source| SubgraphError::Json {
            path: path.clone(),
            source,
        })?;
        out.write_all(b"\n").map_err(io_err)?;
        out.flush().map_err(io_err)?;
    }
    Ok(())
}

/// Loads every `*.json` subgraph in `dir`, ordered by root (start, id).
pub fn load_subgraphs(dir: &Path) -> Result<Vec<RootedSubgraph>, SubgraphError> {
    let io_err = |path: &Path, source| SubgraphError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let g: RootedSubgraph =
            serde_json::from_str(&text).map_err(|source| SubgraphError::Json {
                path: path.clone(),
                source,
            })?;
        out.push(g);
    }
    out.sort_by(|a, b| (a.root_start(), &a.root_id).cmp(&(b.root_start(), &b.root_id)));
    Ok(out)
}
