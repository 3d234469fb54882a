use std::collections::BTreeSet;

use sentinel_core::corpus::ActionStore;
use sentinel_core::sampler::{sample_all, RootedSubgraph, SamplerConfig};
use sentinel_core::simgen::{generate, RootLabel, SimConfig};

/// Some ticket action by the querying agent on the queried customer happens
/// before the query.
fn justified(g: &RootedSubgraph) -> bool {
    let root = g.root();
    let of = |ty: &str| -> BTreeSet<&str> {
        root.refs
            .iter()
            .filter(|r| r.entity_type == ty)
            .map(|r| r.entity_id.as_str())
            .collect()
    };
    let (users, agents) = (of("user"), of("agent"));
    g.actions.iter().any(|a| {
        a.id != g.root_id
            && a.action_type.starts_with("TicketManagement.")
            && a.start_ms < root.start_ms
            && a.refs.iter().any(|r| r.entity_type == "user" && users.contains(r.entity_id.as_str()))
            && a.refs.iter().any(|r| r.entity_type == "agent" && agents.contains(r.entity_id.as_str()))
    })
}

#[test]
fn desk_scale_prevalence_and_justification() {
    let cfg = SimConfig::default();
    let (records, truth) = generate(&cfg).unwrap();
    let n = truth.labels.len();
    assert!((1_500..=2_500).contains(&n), "{n} sensitive roots");
    let p = truth.prevalence();
    assert!((p - 0.02).abs() <= 0.01, "prevalence {p}");

    let store = ActionStore::from_records(records).unwrap();
    let gs = sample_all(&store, &SamplerConfig::default()).unwrap();
    assert_eq!(gs.len(), n);
    for g in &gs {
        match truth.labels[&g.root_id] {
            RootLabel::Normal => assert!(justified(g), "normal root {} lacks a justification", g.root_id),
            RootLabel::Anomaly(kind) => assert!(!justified(g), "{kind:?} root {} looks justified", g.root_id),
        }
    }
}

#[test]
fn prevalence_holds_across_seeds() {
    for seed in [1, 2, 3] {
        let (_, truth) = generate(&SimConfig {
            seed,
            ..SimConfig::default()
        })
        .unwrap();
        let p = truth.prevalence();
        assert!((p - 0.02).abs() <= 0.01, "seed {seed}: prevalence {p}");
    }
}
