use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

use super::{NextTokenDistribution, TokenId, TokenSequence};

/// Nucleus / temperature / repetition-penalty settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub coverage: f64,
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            coverage: 0.9,
            temperature: 1.0,
            repetition_penalty: 1.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(LabError::Config(format!(
                "coverage {} outside (0, 1]",
                self.coverage
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LabError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(LabError::Config(format!(
                "repetition penalty {} must be >= 1",
                self.repetition_penalty
            )));
        }
        Ok(())
    }

    /// True when the pipeline is the identity on distributions.
    pub fn is_identity(&self) -> bool {
        self.coverage >= 1.0 && self.temperature == 1.0 && self.repetition_penalty == 1.0
    }
}

/// Divides positive logits and multiplies negative logits of every token that
/// already occurs in `history`.
pub fn apply_repetition_penalty(logits: &[f64], history: &TokenSequence, penalty: f64) -> Vec<f64> {
    let mut out = logits.to_vec();
    if penalty == 1.0 {
        return out;
    }
    let mut seen = vec![false; logits.len()];
    for &id in history.ids() {
        if id < seen.len() {
            seen[id] = true;
        }
    }
    for (l, _) in out.iter_mut().zip(&seen).filter(|(_, s)| **s) {
        if *l > 0.0 {
            *l /= penalty;
        } else if *l < 0.0 {
            *l *= penalty;
        }
    }
    out
}

pub fn apply_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return logits.to_vec();
    }
    logits.iter().map(|l| l / temperature).collect()
}

/// Keeps the smallest descending-probability prefix whose mass reaches
/// `coverage`, zeroes the rest and renormalizes. Equal probabilities are
/// ordered by token index.
pub fn nucleus_filter(dist: &NextTokenDistribution, coverage: f64) -> NextTokenDistribution {
    if coverage >= 1.0 {
        return dist.clone();
    }
    let probs = dist.probs();
    let mut order: Vec<TokenId> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = vec![0.0; probs.len()];
    let mut cum = 0.0;
    for id in order {
        if probs[id] <= 0.0 {
            break;
        }
        kept[id] = probs[id];
        cum += probs[id];
        if cum >= coverage - 1e-12 {
            break;
        }
    }
    // the kept prefix always has positive mass because dist is valid
    NextTokenDistribution::from_weights(kept).expect("nucleus of a valid distribution")
}

/// Repetition penalty, temperature and nucleus truncation, in that order.
///
/// Penalty and temperature act on log-probabilities. With penalty 1 and
/// temperature 1 the log/exp round trip is skipped so that the pipeline is
/// exactly the identity at full coverage.
pub fn sampling_pipeline(
    dist: &NextTokenDistribution,
    history: &TokenSequence,
    cfg: &SamplingConfig,
) -> Result<NextTokenDistribution> {
    let shaped = if cfg.repetition_penalty == 1.0 && cfg.temperature == 1.0 {
        dist.clone()
    } else {
        let logits: Vec<f64> = dist.probs().iter().map(|p| p.ln()).collect();
        let logits = apply_repetition_penalty(&logits, history, cfg.repetition_penalty);
        let logits = apply_temperature(&logits, cfg.temperature);
        NextTokenDistribution::softmax(&logits)?
    };
    Ok(nucleus_filter(&shaped, cfg.coverage))
}

/// Draws index `i` with probability `weights[i] / sum(weights)`.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<TokenId> {
    let total: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(LabError::DegenerateDistribution(
            "cannot sample from an all-zero distribution".into(),
        ));
    }
    let u = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        cum += w;
        last = i;
        if u < cum {
            return Ok(i);
        }
    }
    Ok(last)
}

pub fn sample_token<R: Rng + ?Sized>(dist: &NextTokenDistribution, rng: &mut R) -> Result<TokenId> {
    sample_index(dist.probs(), rng)
}
