//! Input encoding of rooted subgraphs for the graph network.
//!
//! Categorical strings are hashed into fixed bucket vocabularies so unseen
//! types still map somewhere at inference. One-hot features are stored as
//! bucket indices; the network multiplies them in by gathering weight rows,
//! which is the same product as a one-hot matrix times the weights.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::EntityKey;
use crate::features::signed_log;
use crate::neuralnet::Matrix;
use crate::sampler::RootedSubgraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Hash buckets per vocabulary (action type, entity type, relationship).
    pub buckets: usize,
    /// Width of the entity step one-hot; larger steps share the last slot.
    pub step_slots: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            buckets: 64,
            step_slots: 4,
        }
    }
}

impl EncoderConfig {
    pub fn action_dim(&self) -> usize {
        self.buckets + 2
    }

    pub fn entity_dim(&self) -> usize {
        self.buckets + self.step_slots
    }

    pub fn edge_dim(&self) -> usize {
        self.buckets
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn bucket(s: &str, buckets: usize) -> usize {
    (fnv1a(s) % buckets as u64) as usize
}

/// Compact per-node and per-edge inputs of one subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub action_bucket: Vec<usize>,
    /// `[signed_log(Δstart hours), signed_log(duration hours)]`.
    pub action_numeric: Vec<[f64; 2]>,
    pub entity_bucket: Vec<usize>,
    pub entity_step_slot: Vec<usize>,
    pub edge_bucket: Vec<usize>,
    pub edge_action: Vec<usize>,
    pub edge_entity: Vec<usize>,
    pub root: usize,
}

impl NodeFeatures {
    pub fn action_count(&self) -> usize {
        self.action_bucket.len()
    }

    pub fn entity_count(&self) -> usize {
        self.entity_bucket.len()
    }

    /// Dense action rows: one-hot type bucket followed by the two numeric
    /// columns.
    pub fn action_matrix(&self, cfg: &EncoderConfig) -> Matrix {
        let mut m = Matrix::zeros((self.action_count(), cfg.action_dim()));
        for (r, (&b, num)) in self.action_bucket.iter().zip(&self.action_numeric).enumerate() {
            m[[r, b]] = 1.0;
            m[[r, cfg.buckets]] = num[0];
            m[[r, cfg.buckets + 1]] = num[1];
        }
        m
    }

    pub fn entity_matrix(&self, cfg: &EncoderConfig) -> Matrix {
        let mut m = Matrix::zeros((self.entity_count(), cfg.entity_dim()));
        for (r, (&b, &s)) in self.entity_bucket.iter().zip(&self.entity_step_slot).enumerate() {
            m[[r, b]] = 1.0;
            m[[r, cfg.buckets + s]] = 1.0;
        }
        m
    }

    pub fn edge_matrix(&self, cfg: &EncoderConfig) -> Matrix {
        let mut m = Matrix::zeros((self.edge_bucket.len(), cfg.edge_dim()));
        for (r, &b) in self.edge_bucket.iter().enumerate() {
            m[[r, b]] = 1.0;
        }
        m
    }
}

/// Encodes `g`. Nodes are laid out in canonical order (actions by start then
/// id, entities by key) so the encoding ignores how `g` was assembled.
pub fn encode_features(g: &RootedSubgraph, cfg: &EncoderConfig) -> NodeFeatures {
    let root_start = g.root_start();
    let mut actions: Vec<_> = g.actions.iter().collect();
    actions.sort_by(|a, b| (a.start_ms, &a.id).cmp(&(b.start_ms, &b.id)));
    let mut entities: Vec<_> = g.entities.iter().collect();
    entities.sort();
    let action_pos: HashMap<&str, usize> = actions
        .iter()
        .enumerate()
        .map(|(i, a)| (a.id.as_str(), i))
        .collect();
    let entity_pos: HashMap<EntityKey, usize> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.key(), i))
        .collect();

    let mut edges: Vec<(usize, usize, &str)> = g
        .edges
        .iter()
        .map(|e| {
            (
                action_pos[e.action_id.as_str()],
                entity_pos[&EntityKey::new(&e.entity_type, &e.entity_id)],
                e.relationship.as_str(),
            )
        })
        .collect();
    edges.sort();

    NodeFeatures {
        action_bucket: actions
            .iter()
            .map(|a| bucket(&a.action_type, cfg.buckets))
            .collect(),
        action_numeric: actions
            .iter()
            .map(|a| {
                [
                    signed_log(a.delta_hours(root_start)),
                    signed_log(a.duration_hours()),
                ]
            })
            .collect(),
        entity_bucket: entities
            .iter()
            .map(|e| bucket(&e.entity_type, cfg.buckets))
            .collect(),
        entity_step_slot: entities
            .iter()
            .map(|e| (e.step.max(1) as usize - 1).min(cfg.step_slots - 1))
            .collect(),
        edge_bucket: edges.iter().map(|e| bucket(e.2, cfg.buckets)).collect(),
        edge_action: edges.iter().map(|e| e.0).collect(),
        edge_entity: edges.iter().map(|e| e.1).collect(),
        root: action_pos[g.root_id.as_str()],
    }
}

/// Disjoint union of several encoded subgraphs.
#[derive(Debug, Clone, Default)]
pub struct GraphBatch {
    pub action_bucket: Vec<usize>,
    pub action_numeric: Matrix,
    pub entity_bucket: Vec<usize>,
    pub entity_step_slot: Vec<usize>,
    pub edge_bucket: Vec<usize>,
    pub edge_action: Vec<usize>,
    pub edge_entity: Vec<usize>,
    pub action_graph: Vec<usize>,
    pub entity_graph: Vec<usize>,
    pub roots: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&NodeFeatures]) -> Self {
        let mut b = GraphBatch::default();
        let mut numeric = Vec::new();
        for (gi, f) in graphs.iter().enumerate() {
            let (a0, e0) = (b.action_bucket.len(), b.entity_bucket.len());
            b.action_bucket.extend(&f.action_bucket);
            numeric.extend(f.action_numeric.iter().flat_map(|n| n.iter().copied()));
            b.entity_bucket.extend(&f.entity_bucket);
            b.entity_step_slot.extend(&f.entity_step_slot);
            b.edge_bucket.extend(&f.edge_bucket);
            b.edge_action.extend(f.edge_action.iter().map(|i| i + a0));
            b.edge_entity.extend(f.edge_entity.iter().map(|i| i + e0));
            b.action_graph.extend(std::iter::repeat_n(gi, f.action_count()));
            b.entity_graph.extend(std::iter::repeat_n(gi, f.entity_count()));
            b.roots.push(a0 + f.root);
        }
        b.action_numeric = Matrix::from_shape_vec((b.action_bucket.len(), 2), numeric)
            .expect("two numeric columns per action");
        b
    }

    pub fn graph_count(&self) -> usize {
        self.roots.len()
    }
}
