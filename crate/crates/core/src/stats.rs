//! Audit precision and Bayesian credible intervals.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ranking::RankedFinding;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no ground truth for {0:?}")]
    MissingGroundTruth(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// `k` audited, `w` of them worth auditing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditOutcome {
    pub k: u64,
    pub w: u64,
}

impl AuditOutcome {
    pub fn new(k: u64, w: u64) -> Result<Self, StatsError> {
        if w > k {
            return Err(StatsError::InvalidArgument(format!("w={w} exceeds k={k}")));
        }
        Ok(Self { k, w })
    }
}

/// Beta prior on precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaPrior {
    pub const UNIFORM: BetaPrior = BetaPrior {
        alpha: 1.0,
        beta: 1.0,
    };
    pub const JEFFREYS: BetaPrior = BetaPrior {
        alpha: 0.5,
        beta: 0.5,
    };
}

impl Default for BetaPrior {
    fn default() -> Self {
        Self::UNIFORM
    }
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps the series in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta, modified Lentz evaluation.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + even * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + even / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let odd = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + odd * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + odd / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let step = d * c;
        h *= step;
        if (step - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`, i.e. the Beta(a, b) CDF at `x`.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Beta(a, b) quantile by bisection on the CDF.
pub fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if regularized_incomplete_beta(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Equal-tailed credible interval of the Beta posterior on precision.
pub fn credible_interval(
    outcome: AuditOutcome,
    level: f64,
    prior: BetaPrior,
) -> Result<(f64, f64), StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::InvalidArgument(format!("level {level} outside (0, 1)")));
    }
    if !(prior.alpha > 0.0 && prior.beta > 0.0) {
        return Err(StatsError::InvalidArgument("prior parameters must be positive".into()));
    }
    let a = prior.alpha + outcome.w as f64;
    let b = prior.beta + (outcome.k - outcome.w) as f64;
    Ok((
        beta_quantile(a, b, (1.0 - level) / 2.0),
        beta_quantile(a, b, (1.0 + level) / 2.0),
    ))
}

/// Fraction of `true` verdicts.
pub fn precision_at_k(labels: &[bool]) -> Result<f64, StatsError> {
    if labels.is_empty() {
        return Err(StatsError::InvalidArgument("no labels".into()));
    }
    Ok(labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: u64,
    pub w: u64,
    pub precision: f64,
    pub level: f64,
    pub interval: (f64, f64),
}

/// Scores the top `k` findings against ground truth.
pub fn evaluate(
    ranked: &[RankedFinding],
    ground_truth: &HashMap<String, bool>,
    k: usize,
    level: f64,
    prior: BetaPrior,
) -> Result<EvalReport, StatsError> {
    if k == 0 {
        return Err(StatsError::InvalidArgument("k must be at least 1".into()));
    }
    let mut top: Vec<&RankedFinding> = ranked.iter().collect();
    top.sort_by_key(|f| f.rank);
    let verdicts = top
        .iter()
        .take(k)
        .map(|f| {
            ground_truth
                .get(&f.subgraph_id)
                .copied()
                .ok_or_else(|| StatsError::MissingGroundTruth(f.subgraph_id.clone()))
        })
        .collect::<Result<Vec<bool>, _>>()?;
    let precision = precision_at_k(&verdicts)?;
    let outcome = AuditOutcome::new(
        verdicts.len() as u64,
        verdicts.iter().filter(|&&v| v).count() as u64,
    )?;
    Ok(EvalReport {
        k: outcome.k,
        w: outcome.w,
        precision,
        level,
        interval: credible_interval(outcome, level, prior)?,
    })
}
