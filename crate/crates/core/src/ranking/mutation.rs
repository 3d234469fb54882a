//! Mutation catalog: edits that make a natural subgraph resemble behavior
//! an auditor would want to see.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RankingError;
use crate::corpus::ActionRecord;
use crate::sampler::{RootedSubgraph, SubgraphEntity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MutationKind {
    /// Drop every ticket-management action except the root.
    DetachTicketContext,
    /// Point the root at a donor's user and bring that user's activity along.
    SwapSubjectUser,
    /// Move pre-root ticket actions to after the root.
    TimeInvertJustification,
}

impl MutationKind {
    pub const ALL: [MutationKind; 3] = [
        MutationKind::DetachTicketContext,
        MutationKind::SwapSubjectUser,
        MutationKind::TimeInvertJustification,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationConfig {
    pub ticket_type_prefix: String,
    pub user_entity_type: String,
}

impl Default for MutationConfig {
    fn default() -> Self {
        Self {
            ticket_type_prefix: "TicketManagement.".into(),
            user_entity_type: "user".into(),
        }
    }
}

fn inapplicable(kind: MutationKind, g: &RootedSubgraph, reason: &str) -> RankingError {
    RankingError::InapplicableMutation {
        kind,
        root: g.root_id.clone(),
        reason: reason.into(),
    }
}

fn user_ids<'a>(root: &'a ActionRecord, cfg: &MutationConfig) -> BTreeSet<&'a str> {
    root.refs
        .iter()
        .filter(|r| r.entity_type == cfg.user_entity_type)
        .map(|r| r.entity_id.as_str())
        .collect()
}

/// Applies `kind` to `g`. The root action id is preserved; the result is
/// tagged with the mutation it went through.
pub fn mutate(
    g: &RootedSubgraph,
    kind: MutationKind,
    donor_pool: &[RootedSubgraph],
    cfg: &MutationConfig,
    rng: &mut impl Rng,
) -> Result<RootedSubgraph, RankingError> {
    let max_step = g.max_step().max(1);
    let root_start = g.root_start();
    let is_ticket = |a: &ActionRecord| a.id != g.root_id && a.action_type.starts_with(&cfg.ticket_type_prefix);
    let mut out = g.clone();
    match kind {
        MutationKind::DetachTicketContext => {
            if !g.actions.iter().any(is_ticket) {
                return Err(inapplicable(kind, g, "no ticket actions"));
            }
            out.actions.retain(|a| !is_ticket(a));
            out.reachable_restrict(max_step);
        }
        MutationKind::TimeInvertJustification => {
            let mut moved = 0;
            for a in out.actions.iter_mut() {
                if is_ticket(a) && a.start_ms < root_start {
                    let shift = 2 * (root_start - a.start_ms);
                    a.start_ms += shift;
                    a.end_ms += shift;
                    moved += 1;
                }
            }
            if moved == 0 {
                return Err(inapplicable(kind, g, "no ticket actions before the root"));
            }
            out.rebuild_edges();
        }
        MutationKind::SwapSubjectUser => {
            let root = g.root();
            let own = user_ids(root, cfg);
            if own.is_empty() {
                return Err(inapplicable(kind, g, "root has no user"));
            }
            let donors: Vec<&RootedSubgraph> = donor_pool
                .iter()
                .filter(|d| {
                    let theirs = user_ids(d.root(), cfg);
                    !theirs.is_empty() && theirs.is_disjoint(&own)
                })
                .collect();
            let donor = *donors
                .choose(rng)
                .ok_or_else(|| inapplicable(kind, g, "no donor with a different user"))?;
            let donor_root = donor.root();
            let new_user = *user_ids(donor_root, cfg).first().expect("non-empty");

            let mut new_root = root.clone();
            for r in new_root.refs.iter_mut() {
                if r.entity_type == cfg.user_entity_type {
                    r.entity_id = new_user.to_string();
                }
            }
            new_root.refs.sort();
            new_root.refs.dedup();

            let mut actions: BTreeMap<String, ActionRecord> = g
                .actions
                .iter()
                .map(|a| (a.id.clone(), a.clone()))
                .collect();
            actions.insert(new_root.id.clone(), new_root);
            let references_new_user = |a: &ActionRecord| {
                a.refs
                    .iter()
                    .any(|r| r.entity_type == cfg.user_entity_type && r.entity_id == new_user)
            };
            for a in &donor.actions {
                if a.id != donor.root_id && references_new_user(a) {
                    actions.entry(a.id.clone()).or_insert_with(|| a.clone());
                }
            }
            let mut entities: BTreeSet<(String, String)> = g
                .entities
                .iter()
                .chain(&donor.entities)
                .map(|e| (e.entity_type.clone(), e.entity_id.clone()))
                .collect();
            entities.insert((cfg.user_entity_type.clone(), new_user.to_string()));
            out.actions = actions.into_values().collect();
            out.entities = entities
                .into_iter()
                .map(|(entity_type, entity_id)| SubgraphEntity {
                    entity_type,
                    entity_id,
                    step: 1,
                })
                .collect();
            out.reachable_restrict(max_step);
        }
    }
    out.mutation = Some(kind);
    Ok(out)
}

/// One mutated counterpart per natural subgraph where some mutation applies;
/// the kind is drawn uniformly among the applicable ones.
pub fn build_mutated_set(
    naturals: &[RootedSubgraph],
    cfg: &MutationConfig,
    rng: &mut impl Rng,
) -> Vec<RootedSubgraph> {
    let mut out = Vec::with_capacity(naturals.len());
    for g in naturals {
        let mut kinds = MutationKind::ALL;
        kinds.shuffle(rng);
        for kind in kinds {
            if let Ok(m) = mutate(g, kind, naturals, cfg, rng) {
                out.push(m);
                break;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::ActionStore;
    use crate::sampler::{sample_rooted_subgraph, SamplerConfig};
    use crate::testkit::{fig1_records, FIG1_ROOT};

    fn sampled(root: &str) -> RootedSubgraph {
        let store = ActionStore::from_records(fig1_records()).unwrap();
        sample_rooted_subgraph(&store, root, &SamplerConfig::default()).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn detach_keeps_only_the_query() {
        let g = sampled(FIG1_ROOT);
        let m = mutate(&g, MutationKind::DetachTicketContext, &[], &MutationConfig::default(), &mut rng()).unwrap();
        assert_eq!(g.actions.len() - m.actions.len(), 4);
        assert_eq!(m.actions.len(), 1);
        assert_eq!(m.root_id, FIG1_ROOT);
        assert_eq!(m.mutation, Some(MutationKind::DetachTicketContext));
        m.validate(Some(2)).unwrap();
        assert!(mutate(&m, MutationKind::DetachTicketContext, &[], &MutationConfig::default(), &mut rng()).is_err());
    }

    #[test]
    fn time_invert_moves_justification_after_the_query() {
        let g = sampled(FIG1_ROOT);
        let m = mutate(&g, MutationKind::TimeInvertJustification, &[], &MutationConfig::default(), &mut rng()).unwrap();
        let root = m.root_start();
        assert!(m.actions.iter().all(|a| a.start_ms >= root));
        let view = m.action("view.2").unwrap();
        assert!((view.delta_hours(root) - 18.75).abs() < 1e-6);
        m.validate(Some(2)).unwrap();
        assert!(mutate(&m, MutationKind::TimeInvertJustification, &[], &MutationConfig::default(), &mut rng()).is_err());
    }

    #[test]
    fn swap_points_root_at_donor_user() {
        let g = sampled(FIG1_ROOT);
        let donor = sampled("q.9");
        let cfg = MutationConfig::default();
        let m = mutate(&g, MutationKind::SwapSubjectUser, &[g.clone(), donor], &cfg, &mut rng()).unwrap();
        assert_eq!(user_ids(m.root(), &cfg), BTreeSet::from(["user.9"]));
        assert!(m.action("view.9").is_some());
        m.validate(Some(2)).unwrap();
    }

    #[test]
    fn swap_without_donors_is_inapplicable() {
        let g = sampled(FIG1_ROOT);
        let err = mutate(&g, MutationKind::SwapSubjectUser, &[g.clone()], &MutationConfig::default(), &mut rng());
        assert!(matches!(err, Err(RankingError::InapplicableMutation { .. })));
        let err = mutate(&g, MutationKind::SwapSubjectUser, &[], &MutationConfig::default(), &mut rng());
        assert!(matches!(err, Err(RankingError::InapplicableMutation { .. })));
    }

    #[test]
    fn mutated_set_is_valid_and_tagged() {
        let naturals = vec![sampled(FIG1_ROOT), sampled("q.9")];
        let set = build_mutated_set(&naturals, &MutationConfig::default(), &mut rng());
        assert_eq!(set.len(), 2);
        for m in &set {
            assert!(m.mutation.is_some());
            m.validate(Some(2)).unwrap();
        }
    }
}
