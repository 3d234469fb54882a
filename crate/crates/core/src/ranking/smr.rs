//! Feed-forward classifier separating natural from mutated embeddings.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{take_ranked, RankMethod, RankedFinding, RankingError};
use crate::features::Embedding;
use crate::neuralnet::{train_step, Adam, Matrix, NnError, Parameters, Tape, Var};

const LEAK: f64 = 0.01;
const CONFIG_FILE: &str = "smr.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmrConfig {
    pub hidden: usize,
    pub steps: usize,
    /// Items per batch; half natural, half mutated.
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SmrConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 1500,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SmrShape {
    input_dim: usize,
    hidden: usize,
}

/// Two-layer network producing the probability that an embedding came from
/// a mutated subgraph.
#[derive(Debug, Clone, PartialEq)]
pub struct SmrClassifier {
    params: Parameters,
    shape: SmrShape,
    pub loss_curve: Vec<f64>,
}

fn logits(t: &mut Tape, p: &Parameters, x: Matrix) -> Var {
    let x = t.constant(x);
    let w1 = t.param(p, "w1");
    let b1 = t.param(p, "b1");
    let w2 = t.param(p, "w2");
    let b2 = t.param(p, "b2");
    let h = t.matmul(x, w1);
    let h = t.add_row(h, b1);
    let h = t.leaky_relu(h, LEAK);
    let z = t.matmul(h, w2);
    t.add_row(z, b2)
}

fn stack(rows: &[&Embedding]) -> Matrix {
    let dim = rows.first().map_or(0, |e| e.dim());
    Matrix::from_shape_fn((rows.len(), dim), |(r, c)| rows[r].0[c])
}

impl SmrClassifier {
    pub fn input_dim(&self) -> usize {
        self.shape.input_dim
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    /// Probability of "mutated" for each embedding.
    pub fn predict(&self, embeddings: &[&Embedding]) -> Result<Vec<f64>, RankingError> {
        if let Some(bad) = embeddings.iter().find(|e| e.dim() != self.shape.input_dim) {
            return Err(RankingError::DimensionMismatch(bad.dim(), self.shape.input_dim));
        }
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let z = logits(&mut tape, &self.params, stack(embeddings));
        Ok(tape
            .value(z)
            .iter()
            .map(|z| 1.0 / (1.0 + (-z).exp()))
            .collect())
    }

    /// Fraction of correct hard decisions at threshold 0.5.
    pub fn accuracy(&self, natural: &[&Embedding], mutated: &[&Embedding]) -> Result<f64, RankingError> {
        let n = self.predict(natural)?;
        let m = self.predict(mutated)?;
        let correct = n.iter().filter(|&&p| p < 0.5).count() + m.iter().filter(|&&p| p >= 0.5).count();
        Ok(correct as f64 / (n.len() + m.len()).max(1) as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<(), NnError> {
        self.params.save(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.shape)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NnError> {
        let shape: SmrShape = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let params = Parameters::load(dir)?;
        for (name, dims) in [
            ("w1", (shape.input_dim, shape.hidden)),
            ("b1", (1, shape.hidden)),
            ("w2", (shape.hidden, 1)),
            ("b2", (1, 1)),
        ] {
            if params.get(name).map(Matrix::dim) != Some(dims) {
                return Err(NnError::Format(format!("classifier tensor {name} missing or misshapen")));
            }
        }
        Ok(Self {
            params,
            shape,
            loss_curve: Vec::new(),
        })
    }
}

/// Trains the classifier on a balanced stream of natural (label 0) and
/// mutated (label 1) embeddings. Parameters are rounded to `f32` at the end
/// so an in-memory model scores exactly like its saved copy.
pub fn train_smr(
    natural: &[Embedding],
    mutated: &[Embedding],
    cfg: &SmrConfig,
    seed: u64,
) -> Result<SmrClassifier, RankingError> {
    if natural.is_empty() {
        return Err(RankingError::EmptyTrainingSet("natural"));
    }
    if mutated.is_empty() {
        return Err(RankingError::EmptyTrainingSet("mutated"));
    }
    let input_dim = natural[0].dim();
    if let Some(bad) = natural.iter().chain(mutated).find(|e| e.dim() != input_dim) {
        return Err(RankingError::DimensionMismatch(bad.dim(), input_dim));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::default();
    params.add_dense("w1", input_dim, cfg.hidden, &mut rng);
    params.add_zeros("b1", 1, cfg.hidden);
    params.add_dense("w2", cfg.hidden, 1, &mut rng);
    params.add_zeros("b2", 1, 1);
    let mut opt = Adam::new(cfg.learning_rate);
    let half = (cfg.batch_size / 2).max(1);
    let targets: Rc<Vec<f64>> = Rc::new(
        std::iter::repeat_n(0.0, half)
            .chain(std::iter::repeat_n(1.0, half))
            .collect(),
    );
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut rows: Vec<&Embedding> = Vec::with_capacity(2 * half);
        rows.extend((0..half).map(|_| &natural[rng.random_range(0..natural.len())]));
        rows.extend((0..half).map(|_| &mutated[rng.random_range(0..mutated.len())]));
        let x = stack(&rows);
        let loss = train_step(&mut params, &mut opt, |t, p| {
            let z = logits(t, p, x.clone());
            let l = t.logistic_loss(z, targets.clone());
            t.mean(l)
        })?;
        loss_curve.push(loss);
    }
    params.round_to_f32();
    Ok(SmrClassifier {
        params,
        shape: SmrShape {
            input_dim,
            hidden: cfg.hidden,
        },
        loss_curve,
    })
}

/// Trains on all but a held-out fraction of each set and reports accuracy
/// on the held-out part. Which items are held out is decided by `seed`.
pub fn train_smr_holdout(
    natural: &[Embedding],
    mutated: &[Embedding],
    cfg: &SmrConfig,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(SmrClassifier, f64), RankingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut split = |items: &[Embedding]| {
        let mut idx: Vec<usize> = (0..items.len()).collect();
        idx.shuffle(&mut rng);
        let held = ((items.len() as f64 * holdout_fraction).round() as usize).min(items.len().saturating_sub(1));
        let (h, t) = idx.split_at(held);
        (
            t.iter().map(|&i| items[i].clone()).collect::<Vec<_>>(),
            h.iter().map(|&i| items[i].clone()).collect::<Vec<_>>(),
        )
    };
    let (nat_train, nat_held) = split(natural);
    let (mut_train, mut_held) = split(mutated);
    let classifier = train_smr(&nat_train, &mut_train, cfg, seed)?;
    let accuracy = classifier.accuracy(&nat_held.iter().collect::<Vec<_>>(), &mut_held.iter().collect::<Vec<_>>())?;
    Ok((classifier, accuracy))
}

/// Natural subgraphs ordered by descending probability of being mutated.
pub fn smr_rank(
    classifier: &SmrClassifier,
    naturals: &BTreeMap<String, Embedding>,
    k: usize,
) -> Result<Vec<RankedFinding>, RankingError> {
    if k == 0 {
        return Err(RankingError::InvalidK);
    }
    let rows: Vec<&Embedding> = naturals.values().collect();
    let probs = classifier.predict(&rows)?;
    let scored = naturals.keys().cloned().zip(probs).collect();
    Ok(take_ranked(scored, k, RankMethod::Smr, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn cloud(n: usize, center: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> Vec<Embedding> {
        (0..n)
            .map(|_| {
                let raw = center
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(rng);
                        c + spread * z
                    })
                    .collect();
                Embedding::from_raw(raw)
            })
            .collect()
    }

    #[test]
    fn separable_sets_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nat = cloud(600, &[1.0, 0.2, 0.0, 0.1], 0.15, &mut rng);
        let mutd = cloud(600, &[0.0, 0.2, 1.0, 0.1], 0.15, &mut rng);
        let clf = train_smr(&nat[..400], &mutd[..400], &SmrConfig::default(), 1).unwrap();
        let held_n: Vec<&Embedding> = nat[400..].iter().collect();
        let held_m: Vec<&Embedding> = mutd[400..].iter().collect();
        let acc = clf.accuracy(&held_n, &held_m).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn empty_sets_rejected() {
        let e = vec![Embedding::from_raw(vec![1.0, 0.0])];
        assert!(matches!(
            train_smr(&e, &[], &SmrConfig::default(), 0),
            Err(RankingError::EmptyTrainingSet("mutated"))
        ));
        assert!(matches!(
            train_smr(&[], &e, &SmrConfig::default(), 0),
            Err(RankingError::EmptyTrainingSet("natural"))
        ));
    }

    fn constant_classifier(dim: usize) -> SmrClassifier {
        let mut params = Parameters::default();
        params.add_zeros("w1", dim, 4);
        params.add_zeros("b1", 1, 4);
        params.add_zeros("w2", 4, 1);
        params.add_zeros("b2", 1, 1);
        SmrClassifier {
            params,
            shape: SmrShape { input_dim: dim, hidden: 4 },
            loss_curve: Vec::new(),
        }
    }

    #[test]
    fn constant_classifier_ranks_by_id() {
        let clf = constant_classifier(2);
        let naturals = BTreeMap::from([
            ("c".to_string(), Embedding::from_raw(vec![1.0, 0.0])),
            ("a".to_string(), Embedding::from_raw(vec![0.0, 1.0])),
            ("b".to_string(), Embedding::from_raw(vec![1.0, 1.0])),
        ]);
        let ranked = smr_rank(&clf, &naturals, 3).unwrap();
        let ids: Vec<&str> = ranked.iter().map(|f| f.subgraph_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert!(ranked.iter().all(|f| f.score == 0.5 && f.method == RankMethod::Smr));
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let nat = cloud(50, &[1.0, 0.0, 0.0], 0.2, &mut rng);
        let mutd = cloud(50, &[0.0, 0.0, 1.0], 0.2, &mut rng);
        let cfg = SmrConfig { steps: 20, ..SmrConfig::default() };
        let clf = train_smr(&nat, &mutd, &cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        clf.save(dir.path()).unwrap();
        let loaded = SmrClassifier::load(dir.path()).unwrap();
        let rows: Vec<&Embedding> = nat.iter().collect();
        assert_eq!(clf.predict(&rows).unwrap(), loaded.predict(&rows).unwrap());
    }
}
