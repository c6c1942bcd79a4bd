//! Vocabulary, token sequences, next-token distributions and the sampling
//! transforms shared by every other module.

mod sampling;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use sampling::{
    apply_repetition_penalty, apply_temperature, nucleus_filter, sample_index, sample_token,
    sampling_pipeline, SamplingConfig,
};
pub use vocab::Vocabulary;

pub type TokenId = usize;

/// Tolerance on the total mass of a [`NextTokenDistribution`].
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Global-property tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sentiment,
    Regard,
    Toxicity,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sentiment, Task::Regard, Task::Toxicity];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sentiment => "sentiment",
            Task::Regard => "regard",
            Task::Toxicity => "toxicity",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentiment" => Ok(Task::Sentiment),
            "regard" => Ok(Task::Regard),
            "toxicity" => Ok(Task::Toxicity),
            other => Err(LabError::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Prompt,
    Generated,
}

/// A token sequence with a per-position prompt/generated flag.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    origin: Vec<Origin>,
}

impl TokenSequence {
    /// Builds a prompt. An empty prompt becomes `[bos]`.
    pub fn prompt(ids: &[TokenId], bos: TokenId) -> Self {
        let ids = if ids.is_empty() { vec![bos] } else { ids.to_vec() };
        let origin = vec![Origin::Prompt; ids.len()];
        Self { ids, origin }
    }

    pub fn from_parts(ids: Vec<TokenId>, origin: Vec<Origin>) -> Result<Self> {
        if ids.len() != origin.len() {
            return Err(LabError::Invalid(
                "token ids and origin flags differ in length".into(),
            ));
        }
        Ok(Self { ids, origin })
    }

    pub fn push_generated(&mut self, id: TokenId) {
        self.ids.push(id);
        self.origin.push(Origin::Generated);
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn origin(&self) -> &[Origin] {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn prompt_ids(&self) -> Vec<TokenId> {
        self.filtered(Origin::Prompt)
    }

    pub fn generated_ids(&self) -> Vec<TokenId> {
        self.filtered(Origin::Generated)
    }

    pub fn n_generated(&self) -> usize {
        self.origin.iter().filter(|o| **o == Origin::Generated).count()
    }

    fn filtered(&self, which: Origin) -> Vec<TokenId> {
        self.ids
            .iter()
            .zip(&self.origin)
            .filter(|(_, o)| **o == which)
            .map(|(&i, _)| i)
            .collect()
    }
}

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NextTokenDistribution {
    probs: Vec<f64>,
}

impl NextTokenDistribution {
    /// Validates that `probs` is nonnegative, finite and sums to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(LabError::DegenerateDistribution("empty support".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LabError::DegenerateDistribution(
                "negative or non-finite probability".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(LabError::DegenerateDistribution(format!(
                "mass {total} differs from 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LabError::DegenerateDistribution(
                "negative or non-finite weight".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(LabError::DegenerateDistribution("all-zero mass".into()));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Numerically stable softmax of finite logits (`-inf` entries map to zero).
    pub fn softmax(logits: &[f64]) -> Result<Self> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(LabError::NumericFailure(
                "softmax of logits with no finite maximum".into(),
            ));
        }
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        Self::from_weights(weights)
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, at: TokenId) -> Self {
        let mut probs = vec![0.0; n];
        probs[at] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.probs[id]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn support(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, _)| i)
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}
