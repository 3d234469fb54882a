//! Handcrafted subgraph embedding.
//!
//! Non-root actions are split by whether they share the root's user, its
//! agent, or both. For every share class and action type the vector carries
//! the signed-log of the action count and of the earliest and latest start
//! offsets from the root, in hours. The concatenation is L2-normalized.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::RootedSubgraph;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("root {root:?} has no {entity_type} reference")]
    MissingRootEntity { root: String, entity_type: String },
    #[error("invalid feature schema: {0}")]
    InvalidSchema(String),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// `x ↦ sign(x)·ln(1 + |x|)`.
pub fn signed_log(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareClass {
    SharesUser,
    SharesAgent,
    SharesBoth,
}

impl ShareClass {
    pub const ALL: [ShareClass; 3] = [
        ShareClass::SharesUser,
        ShareClass::SharesAgent,
        ShareClass::SharesBoth,
    ];

    fn position(self) -> usize {
        match self {
            ShareClass::SharesUser => 0,
            ShareClass::SharesAgent => 1,
            ShareClass::SharesBoth => 2,
        }
    }

    /// Exclusive classification: an action sharing both is only `SharesBoth`.
    pub fn classify(shares_user: bool, shares_agent: bool) -> Option<ShareClass> {
        match (shares_user, shares_agent) {
            (true, true) => Some(ShareClass::SharesBoth),
            (true, false) => Some(ShareClass::SharesUser),
            (false, true) => Some(ShareClass::SharesAgent),
            (false, false) => None,
        }
    }
}

fn default_user_type() -> String {
    "user".into()
}

fn default_agent_type() -> String {
    "agent".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub action_types: Vec<String>,
    #[serde(default = "default_user_type")]
    pub user_entity_type: String,
    #[serde(default = "default_agent_type")]
    pub agent_entity_type: String,
}

impl FeatureSchema {
    pub fn new(action_types: Vec<String>) -> Result<Self, FeatureError> {
        let schema = Self {
            action_types,
            user_entity_type: default_user_type(),
            agent_entity_type: default_agent_type(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.action_types.is_empty() {
            return Err(FeatureError::InvalidSchema("no action types".into()));
        }
        let distinct: BTreeSet<&String> = self.action_types.iter().collect();
        if distinct.len() != self.action_types.len() {
            return Err(FeatureError::InvalidSchema("duplicate action type".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        3 * ShareClass::ALL.len() * self.action_types.len()
    }

    /// Offset of the `[count, earliest, latest]` triple for a cell.
    pub fn offset(&self, class: ShareClass, type_pos: usize) -> usize {
        3 * (class.position() * self.action_types.len() + type_pos)
    }
}

/// A point on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    /// Normalizes `raw`; the zero vector maps to the first basis vector.
    pub fn from_raw(mut raw: Vec<f64>) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            if let Some(first) = raw.first_mut() {
                *first = 1.0;
            }
        } else {
            raw.iter_mut().for_each(|v| *v /= norm);
        }
        Embedding(raw)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Default, Clone, Copy)]
struct Cell {
    count: usize,
    earliest: f64,
    latest: f64,
}

/// Un-normalized feature vector.
pub fn handcrafted_raw(g: &RootedSubgraph, schema: &FeatureSchema) -> Result<Vec<f64>, FeatureError> {
    schema.validate()?;
    let root = g.root();
    let ids_of = |entity_type: &str| -> BTreeSet<&str> {
        root.refs
            .iter()
            .filter(|r| r.entity_type == entity_type)
            .map(|r| r.entity_id.as_str())
            .collect()
    };
    let users = ids_of(&schema.user_entity_type);
    let agents = ids_of(&schema.agent_entity_type);
    for (ids, ty) in [
        (&users, &schema.user_entity_type),
        (&agents, &schema.agent_entity_type),
    ] {
        if ids.is_empty() {
            return Err(FeatureError::MissingRootEntity {
                root: g.root_id.clone(),
                entity_type: ty.clone(),
            });
        }
    }
    let type_pos: HashMap<&str, usize> = schema
        .action_types
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();

    let mut cells = vec![Cell::default(); ShareClass::ALL.len() * schema.action_types.len()];
    for a in g.actions.iter().filter(|a| a.id != g.root_id) {
        let Some(&pos) = type_pos.get(a.action_type.as_str()) else {
            continue;
        };
        let refs_any = |ty: &str, ids: &BTreeSet<&str>| {
            a.refs
                .iter()
                .any(|r| r.entity_type == ty && ids.contains(r.entity_id.as_str()))
        };
        let Some(class) = ShareClass::classify(
            refs_any(&schema.user_entity_type, &users),
            refs_any(&schema.agent_entity_type, &agents),
        ) else {
            continue;
        };
        let delta = a.delta_hours(root.start_ms);
        let cell = &mut cells[class.position() * schema.action_types.len() + pos];
        if cell.count == 0 {
            cell.earliest = delta;
            cell.latest = delta;
        } else {
            cell.earliest = cell.earliest.min(delta);
            cell.latest = cell.latest.max(delta);
        }
        cell.count += 1;
    }

    Ok(cells
        .iter()
        .flat_map(|c| {
            [
                signed_log(c.count as f64),
                signed_log(c.earliest),
                signed_log(c.latest),
            ]
        })
        .collect())
}

pub fn handcrafted_embedding(
    g: &RootedSubgraph,
    schema: &FeatureSchema,
) -> Result<Embedding, FeatureError> {
    handcrafted_raw(g, schema).map(Embedding::from_raw)
}

/// Action-type vocabulary of a set of subgraphs, sorted.
pub fn schema_from_subgraphs<'a>(
    subgraphs: impl IntoIterator<Item = &'a RootedSubgraph>,
) -> Result<FeatureSchema, FeatureError> {
    let types: BTreeSet<String> = subgraphs
        .into_iter()
        .flat_map(|g| g.actions.iter().map(|a| a.action_type.clone()))
        .collect();
    FeatureSchema::new(types.into_iter().collect())
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRow {
    id: String,
    vector: Vec<f64>,
}

/// Writes `{"id": .., "vector": [..]}` rows in id order.
pub fn write_embeddings(
    path: &std::path::Path,
    embeddings: &BTreeMap<String, Embedding>,
) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (id, e) in embeddings {
        let row = EmbeddingRow {
            id: id.clone(),
            vector: e.0.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&row)?)?;
    }
    out.flush()
}

pub fn read_embeddings(path: &std::path::Path) -> std::io::Result<BTreeMap<String, Embedding>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow = serde_json::from_str(line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), n + 1),
            )
        })?;
        out.insert(row.id, Embedding(row.vector));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn signed_log_values() {
        assert_eq!(signed_log(0.0), 0.0);
        assert!((signed_log(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
        assert!((signed_log(-3.0) + 4f64.ln()).abs() < 1e-15);
        assert!((signed_log(-3.0) + 1.386294).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn signed_log_is_odd_monotone_and_contracting(x in -1e6f64..1e6, y in -1e6f64..1e6) {
            prop_assert_eq!(signed_log(-x), -signed_log(x));
            prop_assert!(signed_log(x).abs() <= x.abs());
            if x < y {
                prop_assert!(signed_log(x) < signed_log(y));
            }
        }
    }

    #[test]
    fn zero_vector_maps_to_first_basis_vector() {
        let e = Embedding::from_raw(vec![0.0; 4]);
        assert_eq!(e.0, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn schema_rejects_duplicates_and_empty() {
        assert!(FeatureSchema::new(vec![]).is_err());
        assert!(FeatureSchema::new(vec!["A".into(), "A".into()]).is_err());
        let s = FeatureSchema::new(vec!["A".into(), "B".into()]).unwrap();
        assert_eq!(s.dimension(), 18);
        assert_eq!(s.offset(ShareClass::SharesBoth, 1), 15);
    }

    #[test]
    fn exclusive_share_classes() {
        assert_eq!(ShareClass::classify(true, true), Some(ShareClass::SharesBoth));
        assert_eq!(ShareClass::classify(true, false), Some(ShareClass::SharesUser));
        assert_eq!(ShareClass::classify(false, true), Some(ShareClass::SharesAgent));
        assert_eq!(ShareClass::classify(false, false), None);
    }
}
