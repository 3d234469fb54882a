use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sentinel_core::corpus::{select_roots, ActionStore};
use sentinel_core::features::{
    handcrafted_embedding, handcrafted_raw, schema_from_subgraphs, signed_log, FeatureSchema, ShareClass,
};
use sentinel_core::sampler::{sample_all, sample_rooted_subgraph, SamplerConfig};
use sentinel_core::testkit::{fig1_records, naive_handcrafted, random_corpus, shuffled, FIG1_ROOT};

#[test]
fn figure_cells() {
    let store = ActionStore::from_records(fig1_records()).unwrap();
    let g = sample_rooted_subgraph(&store, FIG1_ROOT, &SamplerConfig::default()).unwrap();
    let schema = schema_from_subgraphs([&g]).unwrap();
    assert_eq!(
        schema.action_types,
        ["DataTool.Query", "TicketManagement.Assign", "TicketManagement.Transfer", "TicketManagement.View"]
    );
    let raw = handcrafted_raw(&g, &schema).unwrap();
    let cell = |class, pos: usize| {
        let o = schema.offset(class, pos);
        [raw[o], raw[o + 1], raw[o + 2]]
    };
    let one = signed_log(1.0);
    // agent.2's work touches only the customer; agent.1's touches both.
    assert_eq!(cell(ShareClass::SharesUser, 1), [one, signed_log(-1.7), signed_log(-1.7)]);
    assert_eq!(cell(ShareClass::SharesUser, 3), [one, signed_log(-18.75), signed_log(-18.75)]);
    assert_eq!(cell(ShareClass::SharesBoth, 2), [one, signed_log(-0.07), signed_log(-0.07)]);
    assert_eq!(cell(ShareClass::SharesBoth, 3), [one, signed_log(-1.43), signed_log(-1.43)]);
    let nonzero = raw.iter().filter(|x| **x != 0.0).count();
    assert_eq!(nonzero, 12);
    assert!((signed_log(-18.75) + 2.9832).abs() < 1e-4);
    assert_eq!(raw, naive_handcrafted(&g, &schema));
}

#[test]
fn matches_naive_recount_on_random_corpora() {
    let cfg = SamplerConfig::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ActionStore::from_records(random_corpus(&mut rng, 300)).unwrap();
        let gs = sample_all(&store, &cfg).unwrap();
        if gs.is_empty() {
            continue;
        }
        let schema = schema_from_subgraphs(&gs).unwrap();
        for g in &gs {
            let raw = handcrafted_raw(g, &schema).unwrap();
            let want = naive_handcrafted(g, &schema);
            for (a, b) in raw.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "seed {seed} root {}", g.root_id);
            }
            let e = handcrafted_embedding(g, &schema).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-6);
            assert_eq!(e, handcrafted_embedding(&shuffled(g, &mut rng), &schema).unwrap());
        }
    }
}

#[test]
fn types_outside_the_schema_are_ignored() {
    let store = ActionStore::from_records(fig1_records()).unwrap();
    let g = sample_rooted_subgraph(&store, FIG1_ROOT, &SamplerConfig::default()).unwrap();
    let schema = FeatureSchema::new(vec!["TicketManagement.View".into()]).unwrap();
    let raw = handcrafted_raw(&g, &schema).unwrap();
    assert_eq!(raw.len(), 9);
    assert_eq!(raw, naive_handcrafted(&g, &schema));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embeddings_are_unit_norm(seed in 0u64..10_000, n in 20usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ActionStore::from_records(random_corpus(&mut rng, n)).unwrap();
        let cfg = SamplerConfig::default();
        let roots = select_roots(&store, &cfg.sensitive_types);
        prop_assume!(!roots.is_empty());
        let gs = sample_all(&store, &cfg).unwrap();
        let schema = schema_from_subgraphs(&gs).unwrap();
        for g in &gs {
            let e = handcrafted_embedding(g, &schema).unwrap();
            prop_assert!((e.norm() - 1.0).abs() < 1e-6);
            prop_assert_eq!(e.dim(), schema.dimension());
        }
    }
}
