//! Combining per-prompt distributions over candidate objects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

pub fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Invalid("no weights".into()));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Invalid(format!("weight {w} is negative or not finite")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::Invalid(format!("weights sum to {sum}, not 1")));
    }
    Ok(())
}

fn check_shapes(distributions: &[Vec<f64>]) -> Result<usize> {
    let first = distributions
        .first()
        .ok_or_else(|| Error::Invalid("no prompt distributions".into()))?;
    if distributions.iter().any(|d| d.len() != first.len()) {
        return Err(Error::Invalid("prompt distributions differ in length".into()));
    }
    Ok(first.len())
}

/// Mean of the prompt distributions. Accumulates `(1/n)·p_j` in prompt order,
/// so the result is bitwise identical to [`weighted`] with weights `1/n`.
pub fn uniform(distributions: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = distributions.len();
    weighted(distributions, &vec![1.0 / n as f64; n])
}

pub fn weighted(distributions: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let len = check_shapes(distributions)?;
    if weights.len() != distributions.len() {
        return Err(Error::Invalid(format!(
            "{} weights for {} prompts",
            weights.len(),
            distributions.len()
        )));
    }
    check_simplex(weights)?;
    let mut out = vec![0.0; len];
    for (d, &w) in distributions.iter().zip(weights) {
        for (o, &p) in out.iter_mut().zip(d) {
            *o += w * p;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Fraction of training triples held out to fit weights.
    pub held_out: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            max_iterations: 200,
            tolerance: 1e-9,
            held_out: 0.1,
        }
    }
}

const PROB_FLOOR: f64 = 1e-12;

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Mean log-likelihood of the gold objects under the mixture.
pub fn log_likelihood(gold_probs: &[Vec<f64>], weights: &[f64]) -> f64 {
    gold_probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(weights)
                .map(|(p, w)| w * p)
                .sum::<f64>()
                .max(PROB_FLOOR)
                .ln()
        })
        .sum::<f64>()
        / gold_probs.len().max(1) as f64
}

/// Mixture weights maximizing the likelihood of held-out gold objects.
/// `gold_probs[q][j]` is prompt `j`'s probability of query `q`'s gold object.
/// Ascends on softmax logits from uniform and halves the step whenever the
/// objective would drop.
pub fn learn_weights(gold_probs: &[Vec<f64>], config: &LearnConfig) -> Result<Vec<f64>> {
    let n = check_shapes(gold_probs)?;
    if n == 0 {
        return Err(Error::Invalid("no prompts to weight".into()));
    }
    let mut logits = vec![0.0; n];
    let mut weights = softmax(&logits);
    let mut objective = log_likelihood(gold_probs, &weights);
    let mut lr = config.learning_rate;
    for _ in 0..config.max_iterations {
        let mut grad = vec![0.0; n];
        for row in gold_probs {
            let mix = row.iter().zip(&weights).map(|(p, w)| w * p).sum::<f64>().max(PROB_FLOOR);
            for k in 0..n {
                grad[k] += weights[k] * (row[k] - mix) / mix;
            }
        }
        grad.iter_mut().for_each(|g| *g /= gold_probs.len() as f64);
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < config.tolerance {
            break;
        }
        let mut improved = false;
        while lr > 1e-12 {
            let trial: Vec<f64> = logits.iter().zip(&grad).map(|(l, g)| l + lr * g).collect();
            let trial_weights = softmax(&trial);
            let trial_objective = log_likelihood(gold_probs, &trial_weights);
            if trial_objective >= objective {
                improved = trial_objective - objective > config.tolerance;
                logits = trial;
                weights = trial_weights;
                objective = trial_objective;
                break;
            }
            lr *= 0.5;
        }
        if !improved {
            break;
        }
    }
    // Renormalize so the stored weights clear the simplex check exactly.
    let sum: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / sum).collect())
}
