use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sentinel_core::features::Embedding;
use sentinel_core::gnn::PairSampler;
use sentinel_core::ranking::{nn_rank, smr_rank, train_smr, train_smr_holdout, InterestingSet, RankMethod, SmrConfig};
use sentinel_core::stats::{evaluate, BetaPrior};
use sentinel_core::testkit::{full_sort_desc, full_sort_nn, random_embeddings};

#[test]
fn nn_rank_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let embs = random_embeddings(&mut rng, 500, 12);
    let ids: Vec<String> = embs.keys().cloned().collect();
    for size in [1, 2, 5, 20] {
        let chosen: Vec<String> = ids.choose_multiple(&mut rng, size).cloned().collect();
        let set = InterestingSet::new(chosen);
        for k in [1, 50, 480, 1000] {
            let got = nn_rank(&embs, &set, k).unwrap();
            let want = full_sort_nn(&embs, &set, k);
            assert_eq!(got.len(), want.len());
            for (i, (f, (id, d))) in got.iter().zip(&want).enumerate() {
                assert_eq!(&f.subgraph_id, id);
                assert!((f.score - d).abs() < 1e-12);
                assert_eq!(f.rank, i + 1);
                assert_eq!(f.method, RankMethod::Nn);
            }
        }
    }
}

#[test]
fn smr_rank_matches_full_sort_of_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let embs = random_embeddings(&mut rng, 500, 8);
    let natural: Vec<Embedding> = embs.values().take(250).cloned().collect();
    let mutated: Vec<Embedding> = embs.values().skip(250).cloned().collect();
    let cfg = SmrConfig {
        steps: 50,
        ..SmrConfig::default()
    };
    let clf = train_smr(&natural, &mutated, &cfg, 3).unwrap();
    let probs = clf.predict(&embs.values().collect::<Vec<_>>()).unwrap();
    let scores: BTreeMap<String, f64> = embs.keys().cloned().zip(probs).collect();
    for k in [1, 50, 500] {
        let got = smr_rank(&clf, &embs, k).unwrap();
        let want = full_sort_desc(&scores, k);
        let got: Vec<(String, f64)> = got.into_iter().map(|f| (f.subgraph_id, f.score)).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn pair_sampler_label_rate_and_groups() {
    let groups: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![3, 4], vec![5], vec![6, 7, 8, 9]];
    let group_of: HashMap<usize, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, m)| m.iter().map(move |&i| (i, g)))
        .collect();
    let sampler = PairSampler::new(&groups, (0..10).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 10_000;
    let mut random = 0;
    for _ in 0..n {
        let p = sampler.sample(0.5, &mut rng);
        if p.y == 1 {
            random += 1;
        } else {
            assert_ne!(p.a, p.b);
            assert_eq!(group_of[&p.a], group_of[&p.b]);
            assert_ne!(group_of[&p.a], 2, "singleton groups give no pairs");
        }
    }
    let rate = random as f64 / n as f64;
    assert!((rate - 0.5).abs() <= 0.02, "random-pair rate {rate}");
}

#[test]
fn random_ranking_matches_prevalence() {
    let n = 2_000;
    let p = 0.02;
    let positives = (n as f64 * p) as usize;
    let truth: HashMap<String, bool> = (0..n).map(|i| (format!("r{i:04}"), i < positives)).collect();
    let ids: Vec<String> = truth.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let k = 50;
    let resamples = 200;
    let mut total = 0.0;
    for _ in 0..resamples {
        let mut order = ids.clone();
        order.shuffle(&mut rng);
        let ranked: Vec<_> = order
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, subgraph_id)| sentinel_core::ranking::RankedFinding {
                subgraph_id,
                method: RankMethod::Nn,
                score: 0.0,
                rank: i + 1,
            })
            .collect();
        total += evaluate(&ranked, &truth, k, 0.9, BetaPrior::UNIFORM).unwrap().precision;
    }
    let mean = total / resamples as f64;
    let sigma = (p * (1.0 - p) / k as f64 / resamples as f64).sqrt();
    assert!((mean - p).abs() <= 3.0 * sigma, "mean {mean} vs {p} (sigma {sigma})");
}

#[test]
fn smr_cannot_separate_identical_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let cloud = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Embedding> {
        (0..n)
            .map(|_| {
                let raw = (0..16)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(rng);
                        j as f64 * 0.1 + z
                    })
                    .collect();
                Embedding::from_raw(raw)
            })
            .collect()
    };
    let natural = cloud(&mut rng, 3_000);
    let mutated = cloud(&mut rng, 3_000);
    let (_, acc) = train_smr_holdout(&natural, &mutated, &SmrConfig::default(), 0.5, 7).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
}
