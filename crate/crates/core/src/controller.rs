//! Per-token intervention loop.
//!
//! Every step runs the base model, evaluates both proxies, picks the loss to
//! minimize, takes one fresh Adam step on the tunable biases, mixes the tuned
//! and base distributions, optionally overrides seed-word masses with a
//! reference distribution, then samples. The model parameters are never
//! mutated; the tuned offsets live only inside one step.

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attr::{
    decay_weight, group_proxy, property_proxy, AttributeClassifier, Chosen, GroupProjector,
    LossTrace, StepTrace,
};
use crate::error::{LabError, Result};
use crate::seqcore::{
    sample_token, sampling_pipeline, NextTokenDistribution, SamplingConfig, TokenId, TokenSequence,
    Vocabulary,
};
use crate::toylm::{DistributionLoss, LinearLoss, ToyLm, TunableDelta};

/// Lower bound on the rescale weights of the min-based rule.
pub const WEIGHT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    GOnly,
    AOnly,
    UddiaSum,
    LidaoMin,
    LidaoProd,
    ElidaoMin,
    ElidaoProd,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::None,
        Method::GOnly,
        Method::AOnly,
        Method::UddiaSum,
        Method::LidaoMin,
        Method::LidaoProd,
        Method::ElidaoMin,
        Method::ElidaoProd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::GOnly => "g_only",
            Method::AOnly => "a_only",
            Method::UddiaSum => "uddia_sum",
            Method::LidaoMin => "lidao_min",
            Method::LidaoProd => "lidao_prod",
            Method::ElidaoMin => "elidao_min",
            Method::ElidaoProd => "elidao_prod",
        }
    }

    pub fn is_extended(self) -> bool {
        matches!(self, Method::ElidaoMin | Method::ElidaoProd)
    }

    fn is_min(self) -> bool {
        matches!(self, Method::LidaoMin | Method::ElidaoMin)
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    pub method: Method,
    pub tau: f64,
    pub gamma: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_len: usize,
    pub elidao_boost: f64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            method: Method::None,
            tau: 0.9,
            gamma: 0.5,
            lr: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_len: 20,
            elidao_boost: 2.0,
        }
    }
}

impl InterventionConfig {
    pub fn with_method(self, method: Method) -> Self {
        Self { method, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(LabError::Config(what.to_string()));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a nonnegative finite number");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam eps must be positive");
        }
        if self.max_len == 0 {
            return bad("max_len must be >= 1");
        }
        if !self.elidao_boost.is_finite() {
            return bad("elidao_boost must be finite");
        }
        Ok(())
    }
}

/// The scalar each method minimizes and the option it picked.
pub fn step_loss(method: Method, lg: f64, la: f64, wg: f64, wa: f64) -> (f64, Chosen) {
    match method {
        Method::None => (0.0, Chosen::None),
        Method::GOnly => (lg, Chosen::GOption),
        Method::AOnly => (la, Chosen::AOption),
        Method::UddiaSum => (lg + la, Chosen::Both),
        Method::LidaoProd | Method::ElidaoProd => (lg * la, Chosen::Product),
        Method::LidaoMin | Method::ElidaoMin => {
            let (g, a) = (lg / wg, la / wa);
            if g <= a {
                (g, Chosen::GOption)
            } else {
                (a, Chosen::AOption)
            }
        }
    }
}

/// Product of two linear losses; its gradient weights each factor's gradient
/// by the other factor's value.
struct ProductLoss<'a> {
    a: &'a LinearLoss,
    b: &'a LinearLoss,
}

impl DistributionLoss for ProductLoss<'_> {
    fn value(&self, p: &NextTokenDistribution) -> f64 {
        self.a.value(p) * self.b.value(p)
    }

    fn grad(&self, p: &NextTokenDistribution) -> Vec<f64> {
        let (va, vb) = (self.a.value(p), self.b.value(p));
        self.a
            .scores
            .iter()
            .zip(&self.b.scores)
            .map(|(sa, sb)| vb * sa + va * sb)
            .collect()
    }
}

fn scaled(l: &LinearLoss, by: f64) -> LinearLoss {
    LinearLoss {
        scores: l.scores.iter().map(|s| s * by).collect(),
    }
}

fn summed(a: &LinearLoss, b: &LinearLoss) -> LinearLoss {
    LinearLoss {
        scores: a.scores.iter().zip(&b.scores).map(|(x, y)| x + y).collect(),
    }
}

/// One Adam update from zero moments, with bias correction.
pub fn adam_single_step(
    grad: &TunableDelta,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<TunableDelta> {
    if !grad.is_finite() {
        return Err(LabError::NumericFailure("non-finite gradient".into()));
    }
    let update = |g: &f64| {
        let m = (1.0 - beta1) * g;
        let v = (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1);
        let v_hat = v / (1.0 - beta2);
        -lr * m_hat / (v_hat.sqrt() + eps)
    };
    Ok(TunableDelta {
        db1: grad.db1.iter().map(update).collect(),
        db2: grad.db2.iter().map(update).collect(),
    })
}

/// Unnormalized geometric mixture `p_tuned^tau * p_base^(1 - tau)`.
pub fn geometric_mix_weights(
    p_tuned: &NextTokenDistribution,
    p_base: &NextTokenDistribution,
    tau: f64,
) -> Vec<f64> {
    if tau == 0.0 || p_tuned == p_base {
        return p_base.probs().to_vec();
    }
    if tau == 1.0 {
        return p_tuned.probs().to_vec();
    }
    p_tuned
        .probs()
        .iter()
        .zip(p_base.probs())
        .map(|(t, b)| t.powf(tau) * b.powf(1.0 - tau))
        .collect()
}

/// Normalized geometric mixture. The endpoints return the inputs unchanged.
pub fn mix_distributions(
    p_tuned: &NextTokenDistribution,
    p_base: &NextTokenDistribution,
    tau: f64,
) -> Result<NextTokenDistribution> {
    if p_tuned.len() != p_base.len() {
        return Err(LabError::Invalid("mixing distributions of different sizes".into()));
    }
    if tau == 0.0 || p_tuned == p_base {
        return Ok(p_base.clone());
    }
    if tau == 1.0 {
        return Ok(p_tuned.clone());
    }
    NextTokenDistribution::from_weights(geometric_mix_weights(p_tuned, p_base, tau))
}

fn override_weights(mut weights: Vec<f64>, p_ref: &NextTokenDistribution, seeds: &BTreeSet<TokenId>) -> Result<NextTokenDistribution> {
    for &id in seeds {
        weights[id] = p_ref.prob(id);
    }
    NextTokenDistribution::from_weights(weights)
}

/// Replaces the masses of `seeds` with the reference distribution's and
/// renormalizes.
pub fn elidao_override(
    p_mix: &NextTokenDistribution,
    p_ref: &NextTokenDistribution,
    seeds: &BTreeSet<TokenId>,
) -> Result<NextTokenDistribution> {
    if seeds.is_empty() {
        return Ok(p_mix.clone());
    }
    if let Some(bad) = seeds.iter().find(|&&id| id >= p_mix.len()) {
        return Err(LabError::Invalid(format!("seed token {bad} out of range")));
    }
    override_weights(p_mix.probs().to_vec(), p_ref, seeds)
}

/// Untuned next-token distribution with `boost` added to the logits of the
/// prompt group's seed words.
pub fn reference_distribution(
    model: &ToyLm,
    vocab: &Vocabulary,
    context: &[TokenId],
    prompt_group: Option<&str>,
    boost: f64,
) -> Result<NextTokenDistribution> {
    let fwd = model.forward(&model.zero_delta(), context)?;
    let seeds = match prompt_group.and_then(|g| vocab.seed_set(g)) {
        Some(s) if boost != 0.0 => s,
        _ => return Ok(fwd.dist),
    };
    let mut logits = fwd.logits;
    for &id in seeds {
        logits[id] += boost;
    }
    NextTokenDistribution::softmax(&logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: TokenSequence,
    /// Prompt followed by the generated tokens.
    pub output: TokenSequence,
    pub trace: LossTrace,
    pub ppl: Option<f64>,
    pub terminated_by: Termination,
}

impl GenerationRecord {
    pub fn generated(&self) -> Vec<TokenId> {
        self.output.generated_ids()
    }
}

/// Decoding state between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub seq: TokenSequence,
    pub trace: LossTrace,
    pub prompt_group: Option<String>,
    pub finished: Option<Termination>,
}

/// Everything one step produced before a token is drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub base: NextTokenDistribution,
    pub tuned: NextTokenDistribution,
    /// Distribution after mixing and the optional seed-word override.
    pub mixed: NextTokenDistribution,
    /// Distribution tokens are drawn from, after the sampling transforms.
    pub sampling: NextTokenDistribution,
    pub delta: TunableDelta,
    pub trace: StepTrace,
}

/// Bundles a base model with the attribute machinery and settings.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    pub model: &'a ToyLm,
    pub vocab: &'a Vocabulary,
    pub projector: &'a GroupProjector,
    pub classifier: &'a AttributeClassifier,
    pub config: InterventionConfig,
    pub sampling: SamplingConfig,
    seed_union: BTreeSet<TokenId>,
}

impl<'a> Decoder<'a> {
    pub fn new(
        model: &'a ToyLm,
        vocab: &'a Vocabulary,
        projector: &'a GroupProjector,
        classifier: &'a AttributeClassifier,
        config: InterventionConfig,
        sampling: SamplingConfig,
    ) -> Result<Self> {
        config.validate()?;
        sampling.validate()?;
        if model.vocab_size() != vocab.len() {
            return Err(LabError::Invalid(format!(
                "model has {} tokens, vocabulary has {}",
                model.vocab_size(),
                vocab.len()
            )));
        }
        Ok(Self {
            model,
            vocab,
            projector,
            classifier,
            config,
            sampling,
            seed_union: vocab.seed_union(),
        })
    }

    pub fn initial_state(&self, prompt: &[TokenId], prompt_group: Option<&str>) -> DecodeState {
        DecodeState {
            seq: TokenSequence::prompt(prompt, self.vocab.bos()),
            trace: Vec::new(),
            prompt_group: prompt_group.map(str::to_string),
            finished: None,
        }
    }

    fn rescale_weight(&self, history: impl Iterator<Item = f64>) -> f64 {
        let h: Vec<f64> = history.collect();
        decay_weight(&h, self.config.gamma)
            .unwrap_or(1.0)
            .max(WEIGHT_FLOOR)
    }

    /// Runs one intervention step on `state` without drawing a token.
    pub fn step(&self, state: &DecodeState) -> Result<StepOutcome> {
        let cfg = &self.config;
        let ctx = state.seq.ids();
        let emb = self.model.embeddings();
        let zero = self.model.zero_delta();
        let base = self.model.forward(&zero, ctx)?.dist;

        let g_loss = property_proxy(self.classifier, ctx, emb);
        let a_proxy = group_proxy(self.projector, ctx, emb);
        let a_loss = a_proxy.combined();
        let lg = g_loss.value(&base);
        let la = a_loss.value(&base);
        if !lg.is_finite() || !la.is_finite() {
            return Err(LabError::NumericFailure(format!(
                "proxy losses not finite (lg={lg}, la={la})"
            )));
        }
        let wg = self.rescale_weight(state.trace.iter().map(|s| s.lg));
        let wa = self.rescale_weight(state.trace.iter().map(|s| s.la));
        let (_, chosen) = step_loss(cfg.method, lg, la, wg, wa);

        let objective: Option<Box<dyn DistributionLoss + '_>> = match cfg.method {
            Method::None => None,
            Method::GOnly => Some(Box::new(g_loss.clone())),
            Method::AOnly => Some(Box::new(a_loss.clone())),
            Method::UddiaSum => Some(Box::new(summed(&g_loss, &a_loss))),
            Method::LidaoProd | Method::ElidaoProd => Some(Box::new(ProductLoss {
                a: &g_loss,
                b: &a_loss,
            })),
            m if m.is_min() => Some(Box::new(match chosen {
                Chosen::GOption => scaled(&g_loss, 1.0 / wg),
                _ => scaled(&a_loss, 1.0 / wa),
            })),
            _ => unreachable!(),
        };

        let (tuned, delta) = match objective {
            Some(obj) if cfg.lr != 0.0 => {
                let grad = self.model.grad_tunable(&zero, ctx, obj.as_ref())?;
                let delta = adam_single_step(&grad, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)?;
                (self.model.forward(&delta, ctx)?.dist, delta)
            }
            _ => (base.clone(), zero),
        };

        let mixed = if cfg.method.is_extended() {
            let p_ref = reference_distribution(
                self.model,
                self.vocab,
                ctx,
                state.prompt_group.as_deref(),
                cfg.elidao_boost,
            )?;
            override_weights(geometric_mix_weights(&tuned, &base, cfg.tau), &p_ref, &self.seed_union)?
        } else {
            mix_distributions(&tuned, &base, cfg.tau)?
        };
        let sampling = sampling_pipeline(&mixed, &state.seq, &self.sampling)?;

        Ok(StepOutcome {
            base,
            tuned,
            mixed,
            sampling,
            delta,
            trace: StepTrace {
                lg,
                la,
                wg,
                wa,
                chosen,
                zero_norm: a_proxy.zero_norm,
            },
        })
    }

    /// Appends `token` and the step's trace entry; marks termination.
    pub fn advance(&self, state: &DecodeState, token: TokenId, trace: StepTrace) -> DecodeState {
        let mut next = state.clone();
        next.seq.push_generated(token);
        next.trace.push(trace);
        if token == self.vocab.eos() {
            next.finished = Some(Termination::Eos);
        } else if next.trace.len() >= self.config.max_len {
            next.finished = Some(Termination::MaxLen);
        }
        next
    }

    pub fn generate(
        &self,
        prompt: &[TokenId],
        prompt_group: Option<&str>,
        seed: u64,
    ) -> Result<GenerationRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = self.initial_state(prompt, prompt_group);
        let prompt_seq = state.seq.clone();
        while state.finished.is_none() {
            let step_idx = state.trace.len();
            let outcome = self.step(&state).map_err(|e| e.at_step(step_idx))?;
            let token = sample_token(&outcome.sampling, &mut rng).map_err(|e| e.at_step(step_idx))?;
            state = self.advance(&state, token, outcome.trace);
        }
        Ok(GenerationRecord {
            prompt: prompt_seq,
            output: state.seq,
            trace: state.trace,
            ppl: None,
            terminated_by: state.finished.expect("loop exits only when finished"),
        })
    }
}
