//! Nearest-neighbor and synthetic-mutation ranking of rooted subgraphs.

mod mutation;
mod smr;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Embedding;
use crate::neuralnet::NnError;

pub use mutation::{build_mutated_set, mutate, MutationConfig, MutationKind};
pub use smr::{smr_rank, train_smr, train_smr_holdout, SmrClassifier, SmrConfig};

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("interesting set is empty")]
    EmptyInterestingSet,
    #[error("no embedding for {0:?}")]
    UnknownId(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("mutation {kind:?} does not apply to {root:?}: {reason}")]
    InapplicableMutation {
        kind: MutationKind,
        root: String,
        reason: String,
    },
    #[error("empty {0} training set")]
    EmptyTrainingSet(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RankMethod {
    #[serde(rename = "NN")]
    Nn,
    #[serde(rename = "SMR")]
    Smr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFinding {
    pub subgraph_id: String,
    pub method: RankMethod,
    pub score: f64,
    pub rank: usize,
}

/// Ordered, duplicate-free set of exemplar subgraph ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InterestingSet {
    ids: Vec<String>,
}

impl InterestingSet {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = Self::default();
        for id in ids {
            set.insert(id.into());
        }
        set
    }

    pub fn insert(&mut self, id: String) -> bool {
        if self.ids.contains(&id) {
            return false;
        }
        self.ids.push(id);
        true
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|i| i == id)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Euclidean distance between two embeddings.
pub fn pairwise_distance(a: &Embedding, b: &Embedding) -> Result<f64, RankingError> {
    if a.dim() != b.dim() {
        return Err(RankingError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Sorts `(id, score)` pairs and assigns ranks 1..=k.
fn take_ranked(
    mut scored: Vec<(String, f64)>,
    k: usize,
    method: RankMethod,
    descending: bool,
) -> Vec<RankedFinding> {
    scored.sort_by(|(ia, sa), (ib, sb)| {
        let ord = if descending {
            sb.total_cmp(sa)
        } else {
            sa.total_cmp(sb)
        };
        ord.then_with(|| ia.cmp(ib))
    });
    scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (subgraph_id, score))| RankedFinding {
            subgraph_id,
            method,
            score,
            rank: i + 1,
        })
        .collect()
}

/// The `k` embeddings outside `interesting` that lie closest to it, where
/// distance to the set is the minimum over its members.
pub fn nn_rank(
    embeddings: &BTreeMap<String, Embedding>,
    interesting: &InterestingSet,
    k: usize,
) -> Result<Vec<RankedFinding>, RankingError> {
    if interesting.is_empty() {
        return Err(RankingError::EmptyInterestingSet);
    }
    if k == 0 {
        return Err(RankingError::InvalidK);
    }
    let anchors = interesting
        .ids()
        .iter()
        .map(|id| {
            embeddings
                .get(id)
                .ok_or_else(|| RankingError::UnknownId(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let excluded: BTreeSet<&str> = interesting.ids().iter().map(String::as_str).collect();
    let mut scored = Vec::with_capacity(embeddings.len());
    for (id, e) in embeddings {
        if excluded.contains(id.as_str()) {
            continue;
        }
        let mut best = f64::INFINITY;
        for anchor in &anchors {
            best = best.min(pairwise_distance(e, anchor)?);
        }
        scored.push((id.clone(), best));
    }
    Ok(take_ranked(scored, k, RankMethod::Nn, false))
}
