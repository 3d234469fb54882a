//! Minimal differentiable-network core shared by the graph embedder and the
//! mutation classifier.

mod params;
mod tape;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use params::{Parameters, BLOB_FILE, MANIFEST_FILE};
pub use tape::{Gradients, Matrix, Tape, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `a²/2` inside `[-delta, delta]`, linear outside.
pub fn huber(a: f64, delta: f64) -> f64 {
    if a.abs() <= delta {
        0.5 * a * a
    } else {
        delta * (a.abs() - 0.5 * delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Huber transition point.
    pub delta: f64,
    /// Distance targeted for random pairs.
    pub target_separation: f64,
    /// Probability that a training pair is a random pair.
    pub phi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            target_separation: 2.0,
            phi: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.delta > 0.0) {
            return Err(format!("delta {} must be positive", self.delta));
        }
        if !(self.target_separation > 0.0 && self.target_separation <= 2.0) {
            return Err(format!(
                "target separation {} outside (0, 2]",
                self.target_separation
            ));
        }
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(format!("phi {} outside (0, 1)", self.phi));
        }
        Ok(())
    }
}

/// Pair loss: same-agent-day pairs (`y = 0`) are pulled to distance 0,
/// random pairs (`y = 1`) towards the target separation.
pub fn contrastive_loss(distance: f64, y: u8, cfg: &LossConfig) -> f64 {
    huber(distance - cfg.target_separation * f64::from(y), cfg.delta)
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, params: &mut Parameters, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(g) = grads.get(&name) else {
                continue;
            };
            let p = params.get_mut(&name).expect("name from params");
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(p.dim()));
            let v = self
                .second
                .entry(name)
                .or_insert_with(|| Matrix::zeros(p.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                });
        }
    }
}

/// Evaluates `loss` on a fresh tape and returns its value and gradients.
pub fn loss_and_gradients<F>(params: &Parameters, loss: F) -> (f64, Gradients)
where
    F: Fn(&mut Tape, &Parameters) -> Var,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, params);
    (tape.scalar(out), tape.backward(out))
}

/// One optimizer update. Returns the mean loss before the update.
pub fn train_step<F>(params: &mut Parameters, opt: &mut Adam, loss: F) -> Result<f64, NnError>
where
    F: Fn(&mut Tape, &Parameters) -> Var,
{
    let (value, grads) = loss_and_gradients(params, loss);
    if !value.is_finite() {
        return Err(NnError::NonFiniteLoss(value));
    }
    opt.apply(params, &grads);
    Ok(value)
}

/// Analytic and central-difference values for one parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + self.numeric.abs()).max(1e-8)
    }

    pub fn absolute_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }
}

/// Compares analytic gradients with central finite differences on up to
/// `coordinates` parameter entries sampled with `seed`.
pub fn grad_samples<F>(
    params: &Parameters,
    loss: F,
    epsilon: f64,
    coordinates: usize,
    seed: u64,
) -> Vec<GradSample>
where
    F: Fn(&mut Tape, &Parameters) -> Var,
{
    assert!((1e-7..=1e-3).contains(&epsilon), "epsilon {epsilon} out of range");
    let (_, grads) = loss_and_gradients(params, &loss);
    let flat: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, m)| (0..m.len()).map(move |i| (name.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, flat.len(), coordinates.min(flat.len()));
    let eval = |p: &Parameters| {
        let mut tape = Tape::new();
        let out = loss(&mut tape, p);
        tape.scalar(out)
    };
    let mut out = Vec::with_capacity(picks.len());
    for pick in picks {
        let (name, i) = &flat[pick];
        let cols = params.get(name).unwrap().ncols();
        let (r, c) = (i / cols, i % cols);
        let mut shifted = params.clone();
        let base = params.get(name).unwrap()[[r, c]];
        shifted.get_mut(name).unwrap()[[r, c]] = base + epsilon;
        let plus = eval(&shifted);
        shifted.get_mut(name).unwrap()[[r, c]] = base - epsilon;
        let minus = eval(&shifted);
        out.push(GradSample {
            name: name.clone(),
            index: *i,
            analytic: grads.get(name).map_or(0.0, |g| g[[r, c]]),
            numeric: (plus - minus) / (2.0 * epsilon),
        });
    }
    out
}

/// Largest relative disagreement, `|a - n| / max(|a| + |n|, 1e-8)`, over
/// the entries [`grad_samples`] draws.
///
/// Entries whose true gradient is zero still get a numeric estimate of about
/// one ulp of the loss over `2 * epsilon`, so on deep piecewise-linear
/// networks this is bounded below by roughly `5e-4` at `epsilon = 1e-5`.
pub fn grad_check<F>(
    params: &Parameters,
    loss: F,
    epsilon: f64,
    coordinates: usize,
    seed: u64,
) -> f64
where
    F: Fn(&mut Tape, &Parameters) -> Var,
{
    grad_samples(params, loss, epsilon, coordinates, seed)
        .iter()
        .map(GradSample::relative_error)
        .fold(0.0, f64::max)
}
