//! Learned subgraph embeddings trained to place subgraphs of the same agent
//! and day close together and random pairs apart.

mod encode;
mod model;
mod search;

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Embedding;
use crate::neuralnet::{train_step, Adam, LossConfig, Matrix, NnError, Parameters, Tape, Var};
use crate::ranking::pairwise_distance;
use crate::sampler::RootedSubgraph;

pub use encode::{bucket, encode_features, EncoderConfig, GraphBatch, NodeFeatures};
pub use model::{forward, init_parameters};
pub use search::{
    holdout_split, hyperparameter_search, selection_score_from_distances, HeldOutPairs, SearchOutcome, SearchSpace,
    TrialRecord, SELECTION_BINS,
};

const HPARAMS_FILE: &str = "hparams.json";
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("no (agent, day) group has two subgraphs")]
    NoPositivePairs,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("no subgraphs")]
    EmptyInput,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnHyperparams {
    pub embedding_dim: usize,
    pub conv_layers: usize,
    pub attention_heads: usize,
    pub readout_rounds: usize,
    pub loss: LossConfig,
    pub steps: usize,
    /// Pairs per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GnnHyperparams {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            conv_layers: 2,
            attention_heads: 2,
            readout_rounds: 2,
            loss: LossConfig::default(),
            steps: 300,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl GnnHyperparams {
    pub fn validate(&self) -> Result<(), GnnError> {
        let bad = |m: String| Err(GnnError::InvalidHyperparams(m));
        if self.embedding_dim == 0
            || self.conv_layers == 0
            || self.attention_heads == 0
            || self.readout_rounds == 0
            || self.batch_size == 0
        {
            return bad("dimensions, layers, heads, rounds and batch size must be positive".into());
        }
        if self.embedding_dim % self.attention_heads != 0 {
            return bad(format!(
                "embedding_dim {} not divisible by {} heads",
                self.embedding_dim, self.attention_heads
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        self.loss.validate().map_err(GnnError::InvalidHyperparams)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelConfig {
    hparams: GnnHyperparams,
    encoder: EncoderConfig,
}

/// Trained parameters together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    pub hparams: GnnHyperparams,
    pub encoder: EncoderConfig,
    pub params: Parameters,
}

impl GnnModel {
    pub fn new(hparams: GnnHyperparams, encoder: EncoderConfig) -> Result<Self, GnnError> {
        hparams.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(hparams.seed);
        let params = init_parameters(&hparams, &encoder, &mut rng);
        Ok(Self {
            hparams,
            encoder,
            params,
        })
    }

    /// Embeds pre-encoded graphs, `EMBED_CHUNK` at a time.
    pub fn embed_encoded(&self, graphs: &[&NodeFeatures]) -> Vec<Embedding> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(EMBED_CHUNK) {
            let batch = GraphBatch::new(chunk);
            let mut tape = Tape::new();
            let z = forward(&mut tape, &self.params, &self.hparams, &batch);
            let m = tape.value(z);
            out.extend(m.rows().into_iter().map(|r| Embedding(r.to_vec())));
        }
        out
    }

    pub fn embed(&self, g: &RootedSubgraph) -> Embedding {
        let f = encode_features(g, &self.encoder);
        self.embed_encoded(&[&f]).remove(0)
    }

    pub fn embed_all(&self, subgraphs: &[RootedSubgraph]) -> Vec<Embedding> {
        let encoded: Vec<NodeFeatures> = subgraphs
            .iter()
            .map(|g| encode_features(g, &self.encoder))
            .collect();
        let refs: Vec<&NodeFeatures> = encoded.iter().collect();
        self.embed_encoded(&refs)
    }

    /// Writes the parameter manifest and blob plus `hparams.json`.
    pub fn save(&self, dir: &Path) -> Result<(), NnError> {
        self.params.save(dir)?;
        let cfg = ModelConfig {
            hparams: self.hparams.clone(),
            encoder: self.encoder,
        };
        std::fs::write(dir.join(HPARAMS_FILE), serde_json::to_string_pretty(&cfg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, GnnError> {
        let text = std::fs::read_to_string(dir.join(HPARAMS_FILE)).map_err(NnError::from)?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(NnError::from)?;
        cfg.hparams.validate()?;
        let params = Parameters::load(dir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let expected = init_parameters(&cfg.hparams, &cfg.encoder, &mut rng);
        for (name, m) in expected.iter() {
            if params.get(name).map(Matrix::dim) != Some(m.dim()) {
                return Err(NnError::Format(format!("tensor {name} missing or misshapen")).into());
            }
        }
        Ok(Self {
            hparams: cfg.hparams,
            encoder: cfg.encoder,
            params,
        })
    }
}

/// Embeds one subgraph with the given parameters.
pub fn gnn_embed(params: &Parameters, hp: &GnnHyperparams, enc: &EncoderConfig, g: &RootedSubgraph) -> Embedding {
    let f = encode_features(g, enc);
    let batch = GraphBatch::new(&[&f]);
    let mut tape = Tape::new();
    let z = forward(&mut tape, params, hp, &batch);
    Embedding(tape.value(z).row(0).to_vec())
}

/// A pair of subgraph indices; `y = 0` for same agent and day, `y = 1` for
/// two independent uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub y: u8,
}

/// Subgraph indices grouped by `(agent, UTC day)` of their root.
pub fn group_by_agent_day(
    subgraphs: &[RootedSubgraph],
    members: &[usize],
) -> BTreeMap<(String, NaiveDate), Vec<usize>> {
    let mut groups: BTreeMap<(String, NaiveDate), Vec<usize>> = BTreeMap::new();
    for &i in members {
        let g = &subgraphs[i];
        groups.entry((g.agent_id.clone(), g.day)).or_default().push(i);
    }
    groups
}

/// Draws pairs from the same-agent-day and random-pair distributions.
#[derive(Debug, Clone)]
pub struct PairSampler {
    groups: Vec<Vec<usize>>,
    all: Vec<usize>,
}

impl PairSampler {
    pub fn new<'a>(groups: impl IntoIterator<Item = &'a Vec<usize>>, all: Vec<usize>) -> Result<Self, GnnError> {
        let groups: Vec<Vec<usize>> = groups.into_iter().filter(|g| g.len() >= 2).cloned().collect();
        if groups.is_empty() {
            return Err(GnnError::NoPositivePairs);
        }
        Ok(Self { groups, all })
    }

    pub fn sample_with(&self, y: u8, rng: &mut impl Rng) -> PairSample {
        if y == 1 {
            let a = self.all[rng.random_range(0..self.all.len())];
            let b = self.all[rng.random_range(0..self.all.len())];
            return PairSample { a, b, y };
        }
        let group = &self.groups[rng.random_range(0..self.groups.len())];
        let i = rng.random_range(0..group.len());
        let mut j = rng.random_range(0..group.len() - 1);
        if j >= i {
            j += 1;
        }
        PairSample {
            a: group[i],
            b: group[j],
            y: 0,
        }
    }

    pub fn sample(&self, phi: f64, rng: &mut impl Rng) -> PairSample {
        let y = u8::from(rng.random_bool(phi));
        self.sample_with(y, rng)
    }
}

/// One draw: `y ~ Bernoulli(phi)`, then a pair from the matching distribution.
pub fn sample_pair(
    groups: &BTreeMap<(String, NaiveDate), Vec<usize>>,
    all_ids: &[usize],
    phi: f64,
    rng: &mut impl Rng,
) -> Result<PairSample, GnnError> {
    Ok(PairSampler::new(groups.values(), all_ids.to_vec())?.sample(phi, rng))
}

/// Mean pair loss of the network over a batch of pairs.
pub fn pair_loss(
    t: &mut Tape,
    p: &Parameters,
    hp: &GnnHyperparams,
    batch: &GraphBatch,
    labels: &[u8],
) -> Var {
    let n = labels.len();
    let z = forward(t, p, hp, batch);
    let left = t.gather_rows(z, Rc::new((0..n).collect()));
    let right = t.gather_rows(z, Rc::new((n..2 * n).collect()));
    let diff = t.sub(left, right);
    let dist = t.row_norms(diff);
    let targets = t.constant(Matrix::from_shape_fn((n, 1), |(i, _)| {
        hp.loss.target_separation * f64::from(labels[i])
    }));
    let resid = t.sub(dist, targets);
    let h = t.huber(resid, hp.loss.delta);
    t.mean(h)
}

/// Lays out a pair batch: all left members, then all right members.
pub fn pair_batch(features: &[NodeFeatures], pairs: &[PairSample]) -> (GraphBatch, Vec<u8>) {
    let graphs: Vec<&NodeFeatures> = pairs
        .iter()
        .map(|p| &features[p.a])
        .chain(pairs.iter().map(|p| &features[p.b]))
        .collect();
    (GraphBatch::new(&graphs), pairs.iter().map(|p| p.y).collect())
}

#[derive(Debug, Clone)]
pub struct TrainedGnn {
    pub model: GnnModel,
    pub loss_curve: Vec<f64>,
}

/// Trains on pre-encoded graphs using pairs drawn from `sampler`.
pub fn train_encoded(
    features: &[NodeFeatures],
    sampler: &PairSampler,
    hp: &GnnHyperparams,
    encoder: EncoderConfig,
) -> Result<TrainedGnn, GnnError> {
    let mut model = GnnModel::new(hp.clone(), encoder)?;
    // Pair draws use their own stream so they do not depend on parameter count.
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = Adam::new(hp.learning_rate);
    let mut loss_curve = Vec::with_capacity(hp.steps);
    for _ in 0..hp.steps {
        let pairs: Vec<PairSample> = (0..hp.batch_size)
            .map(|_| sampler.sample(hp.loss.phi, &mut rng))
            .collect();
        let (batch, labels) = pair_batch(features, &pairs);
        let loss = train_step(&mut model.params, &mut opt, |t, p| {
            pair_loss(t, p, hp, &batch, &labels)
        })?;
        loss_curve.push(loss);
    }
    if hp.steps > 0 {
        model.params.round_to_f32();
    }
    Ok(TrainedGnn { model, loss_curve })
}

/// Trains the embedder on all `subgraphs`.
pub fn train_gnn(subgraphs: &[RootedSubgraph], hp: &GnnHyperparams) -> Result<TrainedGnn, GnnError> {
    hp.validate()?;
    if subgraphs.is_empty() {
        return Err(GnnError::EmptyInput);
    }
    let encoder = EncoderConfig::default();
    let features: Vec<NodeFeatures> = subgraphs.iter().map(|g| encode_features(g, &encoder)).collect();
    let all: Vec<usize> = (0..subgraphs.len()).collect();
    let groups = group_by_agent_day(subgraphs, &all);
    let sampler = PairSampler::new(groups.values(), all)?;
    train_encoded(&features, &sampler, hp, encoder)
}

/// Embedding distances of `pairs`, embedding each distinct graph once.
pub fn pair_distances(model: &GnnModel, features: &[NodeFeatures], pairs: &[PairSample]) -> Vec<f64> {
    let mut needed: Vec<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
    needed.sort_unstable();
    needed.dedup();
    let refs: Vec<&NodeFeatures> = needed.iter().map(|&i| &features[i]).collect();
    let embedded: BTreeMap<usize, Embedding> = needed.iter().copied().zip(model.embed_encoded(&refs)).collect();
    pairs
        .iter()
        .map(|p| pairwise_distance(&embedded[&p.a], &embedded[&p.b]).expect("same model, same dimension"))
        .collect()
}

/// Probability that a random-pair distance exceeds a same-agent-day
/// distance, counting ties as one half.
pub fn distance_auc(same: &[f64], random: &[f64]) -> f64 {
    if same.is_empty() || random.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = same
        .iter()
        .map(|&d| (d, false))
        .chain(random.iter().map(|&d| (d, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U over average ranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let np = random.len() as f64;
    let nn = same.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Cross-entropy of same-agent-day distances against random-pair distances;
/// see [`selection_score_from_distances`].
pub fn model_selection_score(
    model: &GnnModel,
    features: &[NodeFeatures],
    same_pairs: &[PairSample],
    random_pairs: &[PairSample],
) -> f64 {
    let same = pair_distances(model, features, same_pairs);
    let random = pair_distances(model, features, random_pairs);
    selection_score_from_distances(&same, &random)
}
