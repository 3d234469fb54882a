//! Breadth-first extraction of rooted subgraphs around sensitive actions.
//!
//! Traversal is level-synchronous. The root's entities sit at step 1. At each
//! step the frontier entities are visited in key order and, for every action
//! type under which an entity is referenced, the `M` not-yet-added actions
//! whose start is closest to the root's start are added. Entities referenced
//! by actions added at step `s` join the frontier at step `s + 1` as long as
//! `s < T`. Entities whose type is blocked are kept but not expanded past
//! step 1.

mod subgraph;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{select_roots, ActionIdx, ActionStore, EntityKey, Millis};

pub use subgraph::{
    load_subgraphs, subgraph_file_name, utc_day, write_subgraphs, RootedSubgraph, SubgraphEdge,
    SubgraphEntity, SubgraphError,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("unknown root action {0:?}")]
    UnknownRoot(String),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
}

fn default_blocked() -> BTreeSet<String> {
    BTreeSet::from(["user".to_string()])
}

fn default_agent_type() -> String {
    "agent".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Maximum entity step that may be expanded.
    #[serde(rename = "T")]
    pub max_steps: u32,
    /// Actions kept per (entity, action type) slot.
    #[serde(rename = "M")]
    pub per_slot: usize,
    #[serde(default = "default_blocked")]
    pub blocked_after_first: BTreeSet<String>,
    #[serde(default)]
    pub sensitive_types: BTreeSet<String>,
    /// Entity type naming the agent that owns a root action.
    #[serde(default = "default_agent_type")]
    pub agent_entity_type: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_steps: 2,
            per_slot: 10,
            blocked_after_first: default_blocked(),
            sensitive_types: BTreeSet::from(["DataTool.Query".to_string()]),
            agent_entity_type: default_agent_type(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.max_steps < 1 {
            return Err(SamplerError::InvalidConfig("T must be at least 1".into()));
        }
        if self.per_slot < 1 {
            return Err(SamplerError::InvalidConfig("M must be at least 1".into()));
        }
        Ok(())
    }
}

/// Yields slot members in increasing `(|start - origin|, start, id)` order.
struct ClosestFirst<'a> {
    store: &'a ActionStore,
    slot: &'a [ActionIdx],
    origin: Millis,
    right: usize,
    // Unconsumed prefix of the slot before the origin is `slot[..left_end]`;
    // the run being drained is `slot[run_pos..run_end]`.
    left_end: usize,
    run_pos: usize,
    run_end: usize,
}

impl<'a> ClosestFirst<'a> {
    fn new(store: &'a ActionStore, slot: &'a [ActionIdx], origin: Millis) -> Self {
        let split = slot.partition_point(|&i| store.record(i).start_ms < origin);
        Self {
            store,
            slot,
            origin,
            right: split,
            left_end: split,
            run_pos: split,
            run_end: split,
        }
    }

    fn start(&self, pos: usize) -> Millis {
        self.store.record(self.slot[pos]).start_ms
    }

    /// Loads the next equal-start run before the origin. Runs are drained in
    /// ascending id order, which the slot order already provides.
    fn refill_left(&mut self) {
        if self.run_pos < self.run_end || self.left_end == 0 {
            return;
        }
        let start = self.start(self.left_end - 1);
        let mut begin = self.left_end - 1;
        while begin > 0 && self.start(begin - 1) == start {
            begin -= 1;
        }
        self.run_pos = begin;
        self.run_end = self.left_end;
        self.left_end = begin;
    }
}

impl Iterator for ClosestFirst<'_> {
    type Item = ActionIdx;

    fn next(&mut self) -> Option<ActionIdx> {
        self.refill_left();
        let left = (self.run_pos < self.run_end).then(|| self.slot[self.run_pos]);
        let right = (self.right < self.slot.len()).then(|| self.slot[self.right]);
        let take_left = match (left, right) {
            (None, None) => return None,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(l), Some(r)) => {
                let (lr, rr) = (self.store.record(l), self.store.record(r));
                let lk = (self.origin - lr.start_ms, lr.start_ms, &lr.id);
                let rk = (rr.start_ms - self.origin, rr.start_ms, &rr.id);
                lk < rk
            }
        };
        if take_left {
            self.run_pos += 1;
            left
        } else {
            self.right += 1;
            right
        }
    }
}

/// Samples the subgraph rooted at `root_id`.
pub fn sample_rooted_subgraph(
    store: &ActionStore,
    root_id: &str,
    cfg: &SamplerConfig,
) -> Result<RootedSubgraph, SamplerError> {
    cfg.validate()?;
    let root_idx = store
        .index_of(root_id)
        .ok_or_else(|| SamplerError::UnknownRoot(root_id.to_string()))?;
    let root = store.record(root_idx);

    let mut added: HashSet<ActionIdx> = HashSet::from([root_idx]);
    let mut order = vec![root_idx];
    let mut steps: BTreeMap<EntityKey, u32> = BTreeMap::new();
    let mut frontier: BTreeSet<EntityKey> = BTreeSet::new();
    for r in &root.refs {
        let key = r.key();
        steps.insert(key.clone(), 1);
        frontier.insert(key);
    }

    let mut step = 1;
    while !frontier.is_empty() && step <= cfg.max_steps {
        let mut newly_added = Vec::new();
        for key in &frontier {
            if step > 1 && cfg.blocked_after_first.contains(&key.entity_type) {
                continue;
            }
            let Some(slots) = store.slots(key) else {
                continue;
            };
            for slot in slots.values() {
                let picked: Vec<ActionIdx> = ClosestFirst::new(store, slot, root.start_ms)
                    .filter(|i| !added.contains(i))
                    .take(cfg.per_slot)
                    .collect();
                for idx in picked {
                    added.insert(idx);
                    newly_added.push(idx);
                }
            }
        }
        let mut next = BTreeSet::new();
        if step < cfg.max_steps {
            for &idx in &newly_added {
                for r in &store.record(idx).refs {
                    let key = r.key();
                    if !steps.contains_key(&key) {
                        steps.insert(key.clone(), step + 1);
                        next.insert(key);
                    }
                }
            }
        }
        order.extend(newly_added);
        frontier = next;
        step += 1;
    }

    let actions = order.into_iter().map(|i| store.record(i).clone()).collect();
    Ok(RootedSubgraph::assemble(
        root,
        &cfg.agent_entity_type,
        actions,
        steps,
    ))
}

/// One subgraph per sensitive root, in root (start, id) order.
pub fn sample_all(
    store: &ActionStore,
    cfg: &SamplerConfig,
) -> Result<Vec<RootedSubgraph>, SamplerError> {
    select_roots(store, &cfg.sensitive_types)
        .iter()
        .map(|id| sample_rooted_subgraph(store, id, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ActionRecord, EntityRef};

    fn rec(id: &str, ty: &str, start: Millis, refs: &[(&str, &str)]) -> ActionRecord {
        ActionRecord {
            id: id.into(),
            action_type: ty.into(),
            start_ms: start,
            end_ms: start,
            refs: refs.iter().map(|(t, i)| EntityRef::new(*t, *i, "r")).collect(),
        }
    }

    #[test]
    fn closest_first_orders_by_distance_then_start_then_id() {
        let store = ActionStore::from_records(vec![
            rec("e", "T", -5, &[("x", "1")]),
            rec("d", "T", -5, &[("x", "1")]),
            rec("c", "T", 5, &[("x", "1")]),
            rec("b", "T", 0, &[("x", "1")]),
            rec("a", "T", 9, &[("x", "1")]),
            rec("f", "T", -20, &[("x", "1")]),
        ])
        .unwrap();
        let key = EntityKey::new("x", "1");
        let slot = store.slot(&key, "T");
        let ids: Vec<&str> = ClosestFirst::new(&store, slot, 0)
            .map(|i| store.record(i).id.as_str())
            .collect();
        assert_eq!(ids, ["b", "d", "e", "c", "a", "f"]);
    }

    #[test]
    fn isolated_root_keeps_only_its_entities() {
        let store = ActionStore::from_records(vec![
            rec("q", "Q", 0, &[("agent", "a"), ("user", "u")]),
            rec("z", "Q", 0, &[("agent", "b")]),
        ])
        .unwrap();
        let g = sample_rooted_subgraph(&store, "q", &SamplerConfig::default()).unwrap();
        assert_eq!(g.actions.len(), 1);
        assert_eq!(g.entities.len(), 2);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.agent_id, "a");
        g.validate(Some(2)).unwrap();
    }

    #[test]
    fn unknown_root_is_an_error() {
        let store = ActionStore::default();
        assert_eq!(
            sample_rooted_subgraph(&store, "nope", &SamplerConfig::default()).unwrap_err(),
            SamplerError::UnknownRoot("nope".into())
        );
    }

    #[test]
    fn rejects_zero_parameters() {
        let store = ActionStore::default();
        let cfg = SamplerConfig {
            per_slot: 0,
            ..SamplerConfig::default()
        };
        assert!(matches!(
            sample_rooted_subgraph(&store, "q", &cfg),
            Err(SamplerError::InvalidConfig(_))
        ));
    }

    #[test]
    fn per_slot_budget_and_step_limit() {
        // q -> agent a (step 1) -> three V actions, M=2 keeps the two nearest.
        // v1 references ticket t (step 2) whose W action comes in at step 2;
        // w references ticket t2, which would be step 3 and is left out.
        let store = ActionStore::from_records(vec![
            rec("q", "Q", 0, &[("agent", "a")]),
            rec("v1", "V", -10, &[("agent", "a"), ("ticket", "t")]),
            rec("v2", "V", 20, &[("agent", "a")]),
            rec("v3", "V", -30, &[("agent", "a")]),
            rec("w", "W", -100, &[("ticket", "t"), ("ticket", "t2")]),
            rec("far", "W", -100, &[("ticket", "t2")]),
        ])
        .unwrap();
        let cfg = SamplerConfig {
            per_slot: 2,
            ..SamplerConfig::default()
        };
        let g = sample_rooted_subgraph(&store, "q", &cfg).unwrap();
        let ids: Vec<&str> = g.actions.iter().map(|a| a.id.as_str()).collect();
        assert_eq!(ids, ["w", "v1", "q", "v2"]);
        assert_eq!(g.entity_step(&EntityKey::new("ticket", "t")), Some(2));
        assert_eq!(g.entity_step(&EntityKey::new("ticket", "t2")), None);
        g.validate(Some(2)).unwrap();

        let one_step = SamplerConfig {
            max_steps: 1,
            ..cfg.clone()
        };
        let g1 = sample_rooted_subgraph(&store, "q", &one_step).unwrap();
        assert_eq!(g1.actions.len(), 3);
        assert_eq!(g1.max_step(), 1);
    }

    #[test]
    fn blocked_types_are_not_expanded_past_first_step() {
        let store = ActionStore::from_records(vec![
            rec("q", "Q", 0, &[("agent", "a")]),
            rec("v", "V", -1, &[("agent", "a"), ("user", "u")]),
            rec("x", "X", -2, &[("user", "u")]),
        ])
        .unwrap();
        let g = sample_rooted_subgraph(&store, "q", &SamplerConfig::default()).unwrap();
        assert!(g.action("x").is_none());
        assert_eq!(g.entity_step(&EntityKey::new("user", "u")), Some(2));

        let open = SamplerConfig {
            blocked_after_first: BTreeSet::new(),
            ..SamplerConfig::default()
        };
        let g = sample_rooted_subgraph(&store, "q", &open).unwrap();
        assert!(g.action("x").is_some());
    }

    #[test]
    fn action_reached_twice_is_added_once() {
        let store = ActionStore::from_records(vec![
            rec("q", "Q", 0, &[("agent", "a"), ("user", "u")]),
            rec("v1", "V", -1, &[("agent", "a"), ("user", "u")]),
            rec("v2", "V", -2, &[("agent", "a"), ("user", "u")]),
        ])
        .unwrap();
        let cfg = SamplerConfig {
            per_slot: 1,
            ..SamplerConfig::default()
        };
        // agent slot takes v1, the user slot then takes v2.
        let g = sample_rooted_subgraph(&store, "q", &cfg).unwrap();
        assert_eq!(g.actions.len(), 3);
    }

    #[test]
    fn sample_all_follows_root_order() {
        let store = ActionStore::from_records(vec![
            rec("q2", "DataTool.Query", 5, &[("agent", "a")]),
            rec("q1", "DataTool.Query", 1, &[("agent", "a")]),
            rec("v", "V", 2, &[("agent", "a")]),
        ])
        .unwrap();
        let gs = sample_all(&store, &SamplerConfig::default()).unwrap();
        let roots: Vec<&str> = gs.iter().map(|g| g.root_id.as_str()).collect();
        assert_eq!(roots, ["q1", "q2"]);
        let none = SamplerConfig {
            sensitive_types: BTreeSet::new(),
            ..SamplerConfig::default()
        };
        assert!(sample_all(&store, &none).unwrap().is_empty());
    }
}
