//! Random hyperparameter search scored by how poorly the same-agent-day
//! distance distribution explains random-pair distances.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    distance_auc, encode_features, pair_distances, group_by_agent_day, model_selection_score, train_encoded, EncoderConfig,
    GnnError, GnnHyperparams, GnnModel, NodeFeatures, PairSample, PairSampler,
};
use crate::neuralnet::LossConfig;
use crate::sampler::RootedSubgraph;

pub const SELECTION_BINS: usize = 32;
const HOLDOUT_FRACTION: f64 = 0.2;
const EVAL_PAIRS: usize = 256;

/// Histogram cross-entropy of random-pair distances under the density of
/// same-agent-day distances. Bins split `[0, 2]` evenly and each starts with
/// one pseudo-count.
pub fn selection_score_from_distances(same: &[f64], random: &[f64]) -> f64 {
    let width = 2.0 / SELECTION_BINS as f64;
    let bin = |d: f64| ((d.clamp(0.0, 2.0) / width) as usize).min(SELECTION_BINS - 1);
    let mut counts = [1.0f64; SELECTION_BINS];
    for &d in same {
        counts[bin(d)] += 1.0;
    }
    let total = same.len() as f64 + SELECTION_BINS as f64;
    if random.is_empty() {
        return 0.0;
    }
    random
        .iter()
        .map(|&d| -(counts[bin(d)] / total / width).ln())
        .sum::<f64>()
        / random.len() as f64
}

/// Candidate values for each hyperparameter. Lists are sampled uniformly;
/// `[lo, hi]` ranges uniformly, except the learning rate which is sampled
/// log-uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub embedding_dim: Vec<usize>,
    pub conv_layers: Vec<usize>,
    pub attention_heads: Vec<usize>,
    pub readout_rounds: Vec<usize>,
    pub delta: [f64; 2],
    pub target_separation: [f64; 2],
    pub phi: [f64; 2],
    pub learning_rate: [f64; 2],
    pub steps: Vec<usize>,
    pub batch_size: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            embedding_dim: vec![16, 32],
            conv_layers: vec![1, 2],
            attention_heads: vec![1, 2],
            readout_rounds: vec![1, 2],
            delta: [0.5, 1.5],
            target_separation: [1.5, 2.0],
            phi: [0.3, 0.7],
            learning_rate: [1e-3, 1e-2],
            steps: vec![150],
            batch_size: vec![16],
        }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<(), GnnError> {
        let bad = |m: &str| Err(GnnError::InvalidHyperparams(m.into()));
        if [
            &self.embedding_dim,
            &self.conv_layers,
            &self.attention_heads,
            &self.readout_rounds,
            &self.steps,
            &self.batch_size,
        ]
        .iter()
        .any(|v| v.is_empty())
        {
            return bad("every list in the search space needs a value");
        }
        for [lo, hi] in [self.delta, self.target_separation, self.phi, self.learning_rate] {
            if !(lo <= hi) {
                return bad("range with lo > hi");
            }
        }
        if !(self.learning_rate[0] > 0.0) {
            return bad("learning rate range must be positive");
        }
        Ok(())
    }

    /// Draws one configuration. Head counts that do not divide the drawn
    /// dimension are skipped.
    pub fn draw(&self, seed: u64, rng: &mut impl Rng) -> Result<GnnHyperparams, GnnError> {
        let embedding_dim = *self.embedding_dim.choose(rng).expect("validated");
        let heads: Vec<usize> = self
            .attention_heads
            .iter()
            .copied()
            .filter(|&h| h > 0 && embedding_dim % h == 0)
            .collect();
        let attention_heads = *heads.choose(rng).ok_or_else(|| {
            GnnError::InvalidHyperparams(format!("no head count divides {embedding_dim}"))
        })?;
        let mut range = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let delta = range(self.delta);
        let target_separation = range(self.target_separation);
        let phi = range(self.phi);
        let learning_rate = range([self.learning_rate[0].ln(), self.learning_rate[1].ln()]).exp();
        let hp = GnnHyperparams {
            embedding_dim,
            attention_heads,
            conv_layers: *self.conv_layers.choose(rng).expect("validated"),
            readout_rounds: *self.readout_rounds.choose(rng).expect("validated"),
            loss: LossConfig {
                delta,
                target_separation,
                phi,
            },
            steps: *self.steps.choose(rng).expect("validated"),
            batch_size: *self.batch_size.choose(rng).expect("validated"),
            learning_rate,
            seed,
        };
        hp.validate()?;
        Ok(hp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub hparams: GnnHyperparams,
    pub score: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub trials: Vec<TrialRecord>,
    /// Index into `trials` of the winner.
    pub best: usize,
    pub model: GnnModel,
    pub loss_curve: Vec<f64>,
}

/// SplitMix64 finalizer; spreads trial indices into unrelated seeds.
fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fixed evaluation pairs drawn from held-out (agent, day) groups.
#[derive(Debug, Clone)]
pub struct HeldOutPairs {
    pub same: Vec<PairSample>,
    pub random: Vec<PairSample>,
}

impl HeldOutPairs {
    pub fn auc(&self, model: &GnnModel, features: &[NodeFeatures]) -> f64 {
        distance_auc(
            &pair_distances(model, features, &self.same),
            &pair_distances(model, features, &self.random),
        )
    }
}

/// Splits whole (agent, day) groups into training and held-out parts and
/// draws the fixed evaluation pairs from the held-out part.
pub fn holdout_split(
    subgraphs: &[RootedSubgraph],
    rng: &mut impl Rng,
) -> Result<(PairSampler, HeldOutPairs), GnnError> {
    let all: Vec<usize> = (0..subgraphs.len()).collect();
    let groups: Vec<Vec<usize>> = group_by_agent_day(subgraphs, &all).into_values().collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let held_count = ((groups.len() as f64 * HOLDOUT_FRACTION).ceil() as usize).clamp(1, groups.len());
    let held: BTreeSet<usize> = order[..held_count].iter().copied().collect();
    let (mut train_groups, mut held_groups) = (Vec::new(), Vec::new());
    for (i, g) in groups.into_iter().enumerate() {
        if held.contains(&i) {
            held_groups.push(g);
        } else {
            train_groups.push(g);
        }
    }
    let train_all: Vec<usize> = train_groups.iter().flatten().copied().collect();
    let held_all: Vec<usize> = held_groups.iter().flatten().copied().collect();
    let train = PairSampler::new(&train_groups, train_all)?;
    let held = PairSampler::new(&held_groups, held_all)?;
    Ok((
        train,
        HeldOutPairs {
            same: (0..EVAL_PAIRS).map(|_| held.sample_with(0, rng)).collect(),
            random: (0..EVAL_PAIRS).map(|_| held.sample_with(1, rng)).collect(),
        },
    ))
}

/// Trains `budget` independently drawn configurations on the training
/// groups and keeps the one with the highest selection score on held-out
/// pairs. Ties go to the earlier trial. Trials run on parallel threads but
/// each is seeded from `seed` and its index, so results do not depend on
/// scheduling.
pub fn hyperparameter_search(
    subgraphs: &[RootedSubgraph],
    space: &SearchSpace,
    budget: usize,
    seed: u64,
) -> Result<SearchOutcome, GnnError> {
    if budget == 0 {
        return Err(GnnError::InvalidHyperparams("budget must be at least 1".into()));
    }
    if subgraphs.is_empty() {
        return Err(GnnError::EmptyInput);
    }
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, held) = holdout_split(subgraphs, &mut rng)?;
    let hps: Vec<GnnHyperparams> = (0..budget)
        .map(|i| space.draw(derive_seed(seed, i as u64), &mut rng))
        .collect::<Result<_, _>>()?;

    let encoder = EncoderConfig::default();
    let features: Vec<NodeFeatures> = subgraphs.iter().map(|g| encode_features(g, &encoder)).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(f64, super::TrainedGnn), GnnError>>>> =
        Mutex::new((0..budget).map(|_| None).collect());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(budget);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= budget {
                    break;
                }
                let outcome = train_encoded(&features, &train, &hps[i], encoder).map(|trained| {
                    let score = model_selection_score(&trained.model, &features, &held.same, &held.random);
                    (score, trained)
                });
                results.lock().expect("no panics while holding the lock")[i] = Some(outcome);
            });
        }
    });

    let mut trials = Vec::with_capacity(budget);
    let mut models = Vec::with_capacity(budget);
    for (index, r) in results.into_inner().expect("threads joined").into_iter().enumerate() {
        let (score, trained) = r.expect("every trial ran")?;
        trials.push(TrialRecord {
            index,
            hparams: hps[index].clone(),
            score,
            final_loss: trained.loss_curve.last().copied().unwrap_or(f64::NAN),
        });
        models.push(trained);
    }
    let best = trials
        .iter()
        .enumerate()
        .fold(0, |best, (i, t)| if t.score > trials[best].score { i } else { best });
    let winner = models.swap_remove(best);
    Ok(SearchOutcome {
        trials,
        best,
        model: winner.model,
        loss_curve: winner.loss_curve,
    })
}
