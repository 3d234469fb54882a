//! Fixtures and brute-force reference implementations for tests.
//!
//! The references here are deliberately naive: linear scans, full sorts and
//! nested loops, sharing no code with the indexed implementations they check.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{ActionRecord, EntityKey, EntityRef, Millis, MILLIS_PER_HOUR};
use crate::features::{signed_log, Embedding, FeatureSchema};
use crate::ranking::InterestingSet;
use crate::sampler::{RootedSubgraph, SamplerConfig};

/// 2024-03-05T10:00:00Z.
pub const FIG1_ROOT_START: Millis = 1_709_632_800_000;
pub const FIG1_ROOT: &str = "q.1";

fn hours(h: f64) -> Millis {
    FIG1_ROOT_START + (h * MILLIS_PER_HOUR).round() as Millis
}

fn record(id: &str, ty: &str, start: Millis, minutes: i64, refs: &[(&str, &str, &str)]) -> ActionRecord {
    ActionRecord {
        id: id.into(),
        action_type: ty.into(),
        start_ms: start,
        end_ms: start + minutes * 60_000,
        refs: refs.iter().map(|(t, i, r)| EntityRef::new(*t, *i, *r)).collect(),
    }
}

/// The example subgraph from the figure: agent.1 queries user.1 after
/// viewing (−1.43 h) and transferring (−0.07 h) ticket.1, which agent.2
/// viewed (−18.75 h) and assigned to themself (−1.7 h). Other records touch
/// none of those entities.
pub fn fig1_records() -> Vec<ActionRecord> {
    let ticket = |agent: &'static str| [("agent", agent, "actor"), ("ticket", "ticket.1", "target"), ("user", "user.1", "subject")];
    vec![
        record(
            FIG1_ROOT,
            "DataTool.Query",
            FIG1_ROOT_START,
            2,
            &[("agent", "agent.1", "actor"), ("user", "user.1", "subject")],
        ),
        record("view.1", "TicketManagement.View", hours(-1.43), 6, &ticket("agent.1")),
        record("transfer.1", "TicketManagement.Transfer", hours(-0.07), 1, &ticket("agent.1")),
        record("view.2", "TicketManagement.View", hours(-18.75), 9, &ticket("agent.2")),
        record("assign.2", "TicketManagement.Assign", hours(-1.7), 1, &ticket("agent.2")),
        record(
            "q.9",
            "DataTool.Query",
            hours(-3.0),
            2,
            &[("agent", "agent.3", "actor"), ("user", "user.9", "subject")],
        ),
        record(
            "view.9",
            "TicketManagement.View",
            hours(-4.0),
            5,
            &[("agent", "agent.3", "actor"), ("ticket", "ticket.9", "target"), ("user", "user.9", "subject")],
        ),
    ]
}

/// Node and edge sets the figure shows.
pub struct Fig1Expected {
    pub actions: BTreeSet<&'static str>,
    pub entities: BTreeSet<(&'static str, &'static str, u32)>,
    pub edges: BTreeSet<(&'static str, &'static str, &'static str)>,
}

pub fn fig1_expected() -> Fig1Expected {
    let mut edges = BTreeSet::from([(FIG1_ROOT, "agent", "agent.1"), (FIG1_ROOT, "user", "user.1")]);
    for (id, agent) in [
        ("view.1", "agent.1"),
        ("transfer.1", "agent.1"),
        ("view.2", "agent.2"),
        ("assign.2", "agent.2"),
    ] {
        edges.insert((id, "agent", agent));
        edges.insert((id, "ticket", "ticket.1"));
        edges.insert((id, "user", "user.1"));
    }
    Fig1Expected {
        actions: BTreeSet::from([FIG1_ROOT, "view.1", "transfer.1", "view.2", "assign.2"]),
        entities: BTreeSet::from([
            ("agent", "agent.1", 1),
            ("user", "user.1", 1),
            ("agent", "agent.2", 2),
            ("ticket", "ticket.1", 2),
        ]),
        edges,
    }
}

/// Reference sampler: at every level, for each frontier entity, scans the
/// whole record list for candidates and fully sorts each action type's
/// candidates by the tie-break key.
pub fn reference_sample(records: &[ActionRecord], root_id: &str, cfg: &SamplerConfig) -> RootedSubgraph {
    let root = records.iter().find(|r| r.id == root_id).expect("root exists");
    let mut added: Vec<&ActionRecord> = vec![root];
    let mut added_ids: BTreeSet<&str> = BTreeSet::from([root.id.as_str()]);
    let mut steps: BTreeMap<EntityKey, u32> = BTreeMap::new();
    let mut frontier: Vec<EntityKey> = root.refs.iter().map(EntityRef::key).collect();
    for k in &frontier {
        steps.insert(k.clone(), 1);
    }
    let mut step = 1;
    while step <= cfg.max_steps && !frontier.is_empty() {
        frontier.sort();
        frontier.dedup();
        let mut this_level: Vec<&ActionRecord> = Vec::new();
        for key in &frontier {
            if step > 1 && cfg.blocked_after_first.contains(&key.entity_type) {
                continue;
            }
            let mut by_type: BTreeMap<&str, Vec<&ActionRecord>> = BTreeMap::new();
            for r in records.iter().filter(|r| {
                r.refs
                    .iter()
                    .any(|x| x.entity_type == key.entity_type && x.entity_id == key.entity_id)
            }) {
                by_type.entry(r.action_type.as_str()).or_default().push(r);
            }
            for candidates in by_type.into_values() {
                let mut candidates: Vec<&ActionRecord> =
                    candidates.into_iter().filter(|r| !added_ids.contains(r.id.as_str())).collect();
                candidates.sort_by_key(|r| ((r.start_ms - root.start_ms).abs(), r.start_ms, r.id.clone()));
                for c in candidates.into_iter().take(cfg.per_slot) {
                    added_ids.insert(c.id.as_str());
                    added.push(c);
                    this_level.push(c);
                }
            }
        }
        let mut next = Vec::new();
        if step < cfg.max_steps {
            for a in &this_level {
                for r in &a.refs {
                    let k = r.key();
                    if !steps.contains_key(&k) {
                        steps.insert(k.clone(), step + 1);
                        next.push(k);
                    }
                }
            }
        }
        frontier = next;
        step += 1;
    }
    RootedSubgraph::assemble(
        root,
        &cfg.agent_entity_type,
        added.into_iter().cloned().collect(),
        steps,
    )
}

/// Random corpus over small entity pools with coarse timestamps so that
/// distance and start ties are common. About one action in six is a query.
pub fn random_corpus(rng: &mut impl Rng, n: usize) -> Vec<ActionRecord> {
    const TYPES: [&str; 4] = ["DataTool.Query", "TicketManagement.View", "TicketManagement.Reply", "Notes.Edit"];
    const KINDS: [(&str, usize); 3] = [("agent", 6), ("user", 10), ("ticket", 12)];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ty = if rng.random_ratio(1, 6) {
            TYPES[0]
        } else {
            TYPES[rng.random_range(1..TYPES.len())]
        };
        let start = rng.random_range(-20..=20) * 1_800_000;
        let mut refs: Vec<EntityRef> = Vec::new();
        for (kind, pool) in KINDS {
            if rng.random_bool(0.7) || (kind == "agent" && refs.is_empty()) {
                refs.push(EntityRef::new(kind, format!("{kind}.{}", rng.random_range(0..pool)), "r"));
            }
        }
        if ty == TYPES[0] && !refs.iter().any(|r| r.entity_type == "user") {
            refs.push(EntityRef::new("user", format!("user.{}", rng.random_range(0..10)), "subject"));
        }
        if !refs.iter().any(|r| r.entity_type == "agent") {
            refs.push(EntityRef::new("agent", format!("agent.{}", rng.random_range(0..6)), "actor"));
        }
        out.push(ActionRecord {
            id: format!("a{i:04}"),
            action_type: ty.into(),
            start_ms: start,
            end_ms: start + rng.random_range(0..600_000),
            refs,
        });
    }
    out
}

/// Handcrafted features recounted cell by cell with nested loops.
pub fn naive_handcrafted(g: &RootedSubgraph, schema: &FeatureSchema) -> Vec<f64> {
    let root = g.root();
    let has = |a: &ActionRecord, ty: &str| {
        a.refs.iter().any(|r| {
            r.entity_type == ty
                && root
                    .refs
                    .iter()
                    .any(|q| q.entity_type == ty && q.entity_id == r.entity_id)
        })
    };
    let mut out = Vec::new();
    for (want_user, want_agent) in [(true, false), (false, true), (true, true)] {
        for ty in &schema.action_types {
            let mut count = 0usize;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for a in &g.actions {
                if a.id == g.root_id || a.action_type != *ty {
                    continue;
                }
                let u = has(a, &schema.user_entity_type);
                let ag = has(a, &schema.agent_entity_type);
                if u == want_user && ag == want_agent {
                    count += 1;
                    let d = (a.start_ms - root.start_ms) as f64 / MILLIS_PER_HOUR;
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
            }
            if count == 0 {
                out.extend([0.0, 0.0, 0.0]);
            } else {
                out.extend([signed_log(count as f64), signed_log(lo), signed_log(hi)]);
            }
        }
    }
    out
}

/// Copy of `g` with actions, entities and edges in shuffled order.
pub fn shuffled(g: &RootedSubgraph, rng: &mut impl Rng) -> RootedSubgraph {
    let mut s = g.clone();
    s.actions.shuffle(rng);
    s.entities.shuffle(rng);
    s.edges.shuffle(rng);
    for a in s.actions.iter_mut() {
        a.refs.shuffle(rng);
    }
    s
}

/// Full-sort nearest-neighbor ranking: `(id, score)` pairs.
pub fn full_sort_nn(embeddings: &BTreeMap<String, Embedding>, interesting: &InterestingSet, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = embeddings
        .iter()
        .filter(|(id, _)| !interesting.contains(id))
        .map(|(id, e)| {
            let d = interesting
                .ids()
                .iter()
                .map(|i| {
                    let x = &embeddings[i].0;
                    e.0.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            (id.clone(), d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Full-sort descending-score ranking: `(id, score)` pairs.
pub fn full_sort_desc(scores: &BTreeMap<String, f64>, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = scores.iter().map(|(i, s)| (i.clone(), *s)).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Random unit vectors in `dim` dimensions keyed `e000`, `e001`, ...
pub fn random_embeddings(rng: &mut impl Rng, n: usize, dim: usize) -> BTreeMap<String, Embedding> {
    (0..n)
        .map(|i| {
            let raw = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            (format!("e{i:03}"), Embedding::from_raw(raw))
        })
        .collect()
}
