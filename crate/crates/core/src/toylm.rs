//! A tiny differentiable language model: mean context embedding, one tanh
//! hidden layer, softmax output. Only the two bias vectors are tunable, and
//! their gradients are computed analytically.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seqcore::{NextTokenDistribution, Origin, TokenId, TokenSequence};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CONTEXT_WINDOW: usize = 4;

/// Loss on a next-token distribution with an analytic gradient in `p`.
///
/// `grad` returns the partial derivatives with respect to each probability,
/// treating the entries of `p` as independent variables.
pub trait DistributionLoss {
    fn value(&self, p: &NextTokenDistribution) -> f64;
    fn grad(&self, p: &NextTokenDistribution) -> Vec<f64>;
}

/// `loss(p) = sum_i p_i * scores_i`. Every per-step proxy has this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLoss {
    pub scores: Vec<f64>,
}

impl DistributionLoss for LinearLoss {
    fn value(&self, p: &NextTokenDistribution) -> f64 {
        p.probs().iter().zip(&self.scores).map(|(a, b)| a * b).sum()
    }

    fn grad(&self, _p: &NextTokenDistribution) -> Vec<f64> {
        self.scores.clone()
    }
}

/// Negative log-probability of one token.
#[derive(Debug, Clone, Copy)]
pub struct NegLogProb(pub TokenId);

impl DistributionLoss for NegLogProb {
    fn value(&self, p: &NextTokenDistribution) -> f64 {
        -p.prob(self.0).ln()
    }

    fn grad(&self, p: &NextTokenDistribution) -> Vec<f64> {
        let mut g = vec![0.0; p.len()];
        g[self.0] = -1.0 / p.prob(self.0);
        g
    }
}

/// Additive offsets to the two tunable bias vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunableDelta {
    pub db1: Vec<f64>,
    pub db2: Vec<f64>,
}

impl TunableDelta {
    pub fn zeros(hidden: usize, vocab: usize) -> Self {
        Self {
            db1: vec![0.0; hidden],
            db2: vec![0.0; vocab],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.db1.iter().chain(&self.db2).all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.db1.iter().chain(&self.db2).all(|v| *v == 0.0)
    }

    /// Flattened view: `db1` followed by `db2`.
    pub fn flat(&self) -> Vec<f64> {
        self.db1.iter().chain(&self.db2).copied().collect()
    }

    pub fn flat_mut(&mut self, i: usize) -> &mut f64 {
        if i < self.db1.len() {
            &mut self.db1[i]
        } else {
            &mut self.db2[i - self.db1.len()]
        }
    }

    pub fn len(&self) -> usize {
        self.db1.len() + self.db2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub dist: NextTokenDistribution,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct ToyLm {
    embed: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
    context_window: usize,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    context_window: usize,
    embed: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
}

impl TryFrom<Checkpoint> for ToyLm {
    type Error = LabError;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.format_version != FORMAT_VERSION {
            return Err(LabError::Invalid(format!(
                "unsupported checkpoint format_version {}",
                c.format_version
            )));
        }
        ToyLm::new(c.embed, c.w1, c.b1, c.w2, c.b2, c.context_window)
    }
}

impl From<ToyLm> for Checkpoint {
    fn from(m: ToyLm) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            context_window: m.context_window,
            embed: m.embed,
            w1: m.w1,
            b1: m.b1,
            w2: m.w2,
            b2: m.b2,
        }
    }
}

fn check_matrix(name: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(LabError::Invalid(format!(
            "{name} must be {rows}x{cols}"
        )));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LabError::Invalid(format!("{name} has non-finite entries")));
    }
    Ok(())
}

impl ToyLm {
    pub fn new(
        embed: Vec<Vec<f64>>,
        w1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        w2: Vec<Vec<f64>>,
        b2: Vec<f64>,
        context_window: usize,
    ) -> Result<Self> {
        let v = embed.len();
        let d = embed.first().map_or(0, Vec::len);
        let h = b1.len();
        if v == 0 || d == 0 || h == 0 {
            return Err(LabError::Invalid("vocabulary, d and h must be >= 1".into()));
        }
        if context_window == 0 {
            return Err(LabError::Invalid("context window must be >= 1".into()));
        }
        check_matrix("embed", &embed, v, d)?;
        check_matrix("w1", &w1, h, d)?;
        check_matrix("w2", &w2, v, h)?;
        check_matrix("b1", std::slice::from_ref(&b1), 1, h)?;
        check_matrix("b2", std::slice::from_ref(&b2), 1, v)?;
        Ok(Self {
            embed,
            w1,
            b1,
            w2,
            b2,
            context_window,
        })
    }

    /// All-zero parameters: the uniform model.
    pub fn zeros(vocab: usize, d: usize, h: usize, context_window: usize) -> Self {
        Self {
            embed: vec![vec![0.0; d]; vocab],
            w1: vec![vec![0.0; d]; h],
            b1: vec![0.0; h],
            w2: vec![vec![0.0; h]; vocab],
            b2: vec![0.0; vocab],
            context_window,
        }
    }

    /// Random model with every parameter uniform in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        vocab: usize,
        d: usize,
        h: usize,
        context_window: usize,
        scale: f64,
    ) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-scale..=scale)).collect::<Vec<_>>();
        let embed = (0..vocab).map(|_| draw(d)).collect();
        let w1 = (0..h).map(|_| draw(d)).collect();
        let b1 = draw(h);
        let w2 = (0..vocab).map(|_| draw(h)).collect();
        let b2 = draw(vocab);
        Self {
            embed,
            w1,
            b1,
            w2,
            b2,
            context_window,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed[0].len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.b1.len()
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn embedding(&self, id: TokenId) -> &[f64] {
        &self.embed[id]
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embed
    }

    pub fn w1(&self) -> &[Vec<f64>] {
        &self.w1
    }

    pub fn b1(&self) -> &[f64] {
        &self.b1
    }

    pub fn w2(&self) -> &[Vec<f64>] {
        &self.w2
    }

    pub fn b2(&self) -> &[f64] {
        &self.b2
    }

    pub fn zero_delta(&self) -> TunableDelta {
        TunableDelta::zeros(self.hidden_dim(), self.vocab_size())
    }

    /// Mean embedding of the last `min(K, len)` context tokens.
    pub fn context_mean(&self, context: &[TokenId]) -> Vec<f64> {
        let start = context.len().saturating_sub(self.context_window);
        let window = &context[start..];
        let mut mean = vec![0.0; self.embed_dim()];
        for &id in window {
            for (m, e) in mean.iter_mut().zip(&self.embed[id]) {
                *m += e;
            }
        }
        let n = window.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    fn check_delta(&self, delta: &TunableDelta) -> Result<()> {
        if delta.db1.len() != self.hidden_dim() || delta.db2.len() != self.vocab_size() {
            return Err(LabError::Invalid("delta shape does not match model".into()));
        }
        Ok(())
    }

    fn check_context(&self, context: &[TokenId]) -> Result<()> {
        if context.is_empty() {
            return Err(LabError::Invalid("context must contain at least one token".into()));
        }
        if let Some(bad) = context.iter().find(|&&id| id >= self.vocab_size()) {
            return Err(LabError::Invalid(format!("token {bad} out of range")));
        }
        Ok(())
    }

    fn logits_and_hidden(&self, delta: &TunableDelta, context: &[TokenId]) -> (Vec<f64>, Vec<f64>) {
        let mean = self.context_mean(context);
        let hidden: Vec<f64> = self
            .w1
            .iter()
            .zip(self.b1.iter().zip(&delta.db1))
            .map(|(row, (b, db))| {
                let pre: f64 = row.iter().zip(&mean).map(|(w, e)| w * e).sum::<f64>() + b + db;
                pre.tanh()
            })
            .collect();
        let logits = self
            .w2
            .iter()
            .zip(self.b2.iter().zip(&delta.db2))
            .map(|(row, (b, db))| row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b + db)
            .collect();
        (logits, hidden)
    }

    pub fn forward(&self, delta: &TunableDelta, context: &[TokenId]) -> Result<Forward> {
        self.check_context(context)?;
        self.check_delta(delta)?;
        let (logits, hidden) = self.logits_and_hidden(delta, context);
        let dist = NextTokenDistribution::softmax(&logits)?;
        Ok(Forward {
            dist,
            hidden,
            logits,
        })
    }

    /// Next-token distribution of the untuned model.
    pub fn next_distribution(&self, context: &[TokenId]) -> Result<NextTokenDistribution> {
        Ok(self.forward(&self.zero_delta(), context)?.dist)
    }

    /// Reverse-mode gradient of `loss(forward(delta, context))` with respect to
    /// the tunable biases.
    pub fn grad_tunable(
        &self,
        delta: &TunableDelta,
        context: &[TokenId],
        loss: &dyn DistributionLoss,
    ) -> Result<TunableDelta> {
        let fwd = self.forward(delta, context)?;
        let value = loss.value(&fwd.dist);
        if !value.is_finite() {
            return Err(LabError::NumericFailure(format!("loss evaluated to {value}")));
        }
        let dp = loss.grad(&fwd.dist);
        let p = fwd.dist.probs();
        let mean_dp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        let dlogits: Vec<f64> = p.iter().zip(&dp).map(|(pi, gi)| pi * (gi - mean_dp)).collect();
        let db1 = (0..self.hidden_dim())
            .map(|k| {
                let dh: f64 = self.w2.iter().zip(&dlogits).map(|(row, g)| row[k] * g).sum();
                dh * (1.0 - fwd.hidden[k] * fwd.hidden[k])
            })
            .collect::<Vec<_>>();
        let grad = TunableDelta { db1, db2: dlogits };
        if !grad.is_finite() {
            return Err(LabError::NumericFailure("non-finite gradient".into()));
        }
        Ok(grad)
    }

    /// Log-probability of `token` after `context`, via log-softmax.
    pub fn log_prob(&self, context: &[TokenId], token: TokenId) -> Result<f64> {
        self.check_context(context)?;
        let (logits, _) = self.logits_and_hidden(&self.zero_delta(), context);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(logits[token] - lse)
    }

    /// Sum of `log p(x_t | x_<t)` over the generated positions of `seq`.
    ///
    /// A zero-probability token yields `-inf`.
    pub fn log_likelihood(&self, seq: &TokenSequence) -> Result<f64> {
        if seq.len() < 2 {
            return Err(LabError::Invalid(
                "log-likelihood needs at least two tokens".into(),
            ));
        }
        let mut total = 0.0;
        for t in 1..seq.len() {
            if seq.origin()[t] != Origin::Generated {
                continue;
            }
            total += self.log_prob(&seq.ids()[..t], seq.ids()[t])?;
        }
        Ok(total)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| LabError::io(path, e))
    }
}

/// Central finite-difference gradient of a loss with respect to the tunable
/// biases. Test and verification oracle; independent of the analytic path.
pub fn finite_difference_grad(
    model: &ToyLm,
    delta: &TunableDelta,
    context: &[TokenId],
    loss: &dyn DistributionLoss,
    step: f64,
) -> Result<TunableDelta> {
    let mut out = model.zero_delta();
    for i in 0..delta.len() {
        let mut plus = delta.clone();
        *plus.flat_mut(i) += step;
        let mut minus = delta.clone();
        *minus.flat_mut(i) -= step;
        let lp = loss.value(&model.forward(&plus, context)?.dist);
        let lm = loss.value(&model.forward(&minus, context)?.dist);
        *out.flat_mut(i) = (lp - lm) / (2.0 * step);
    }
    Ok(out)
}

/// Max over entries of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &TunableDelta, b: &TunableDelta, floor: f64) -> f64 {
    a.flat()
        .iter()
        .zip(b.flat())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_token_model() -> ToyLm {
        ToyLm::new(
            vec![vec![1.0], vec![-1.0]],
            vec![vec![1.0]],
            vec![0.0],
            vec![vec![1.0], vec![-1.0]],
            vec![0.0, 0.0],
            DEFAULT_CONTEXT_WINDOW,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_uniform() {
        let m = ToyLm::zeros(5, 3, 2, 4);
        let d = m.next_distribution(&[0, 1]).unwrap();
        for p in d.probs() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn large_output_bias_dominates() {
        let m = ToyLm::zeros(5, 3, 2, 4);
        let mut delta = m.zero_delta();
        delta.db2[3] = 10.0;
        let d = m.forward(&delta, &[0]).unwrap().dist;
        assert!(d.prob(3) >= 0.999);
    }

    #[test]
    fn hand_computed_forward() {
        let m = two_token_model();
        let f = m.forward(&m.zero_delta(), &[0]).unwrap();
        let t = 1.0f64.tanh();
        assert!((f.logits[0] - t).abs() < 1e-15);
        assert!((f.logits[1] + t).abs() < 1e-15);
        assert!((f.dist.prob(0) - 0.821_007_496).abs() < 1e-9);
        assert!((f.dist.prob(1) - 0.178_992_504).abs() < 1e-9);
    }

    #[test]
    fn context_window_truncates() {
        let mut m = two_token_model();
        m.context_window = 1;
        let a = m.next_distribution(&[1, 1, 0]).unwrap();
        let b = m.next_distribution(&[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_loss_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ToyLm::random(&mut rng, 6, 3, 4, 4, 1.0);
        let loss = LinearLoss { scores: vec![2.5; 6] };
        let g = m.grad_tunable(&m.zero_delta(), &[0, 2], &loss).unwrap();
        assert!(g.flat().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn cross_entropy_gradient_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ToyLm::random(&mut rng, 5, 3, 4, 4, 1.0);
        let ctx = [0, 3, 1];
        let g = m.grad_tunable(&m.zero_delta(), &ctx, &NegLogProb(2)).unwrap();
        let p = m.next_distribution(&ctx).unwrap();
        for i in 0..5 {
            let want = p.prob(i) - if i == 2 { 1.0 } else { 0.0 };
            assert!((g.db2[i] - want).abs() < 1e-12);
        }
        let fd = finite_difference_grad(&m, &m.zero_delta(), &ctx, &NegLogProb(2), 1e-5).unwrap();
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-5);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let m = ToyLm::zeros(3, 2, 2, 4);
        let loss = LinearLoss { scores: vec![f64::NAN, 0.0, 0.0] };
        assert!(matches!(
            m.grad_tunable(&m.zero_delta(), &[0], &loss),
            Err(LabError::NumericFailure(_))
        ));
    }

    #[test]
    fn uniform_log_likelihood() {
        let m = ToyLm::zeros(4, 2, 2, 4);
        let mut seq = TokenSequence::prompt(&[0], 0);
        for id in [1, 2, 3, 2, 1] {
            seq.push_generated(id);
        }
        let ll = m.log_likelihood(&seq).unwrap();
        assert!((ll - 5.0 * 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn point_mass_log_likelihood_is_zero() {
        let mut m = ToyLm::zeros(3, 1, 1, 4);
        m.b2 = vec![-2000.0, -2000.0, 0.0];
        let mut seq = TokenSequence::prompt(&[0], 0);
        seq.push_generated(2);
        seq.push_generated(2);
        assert_eq!(m.log_likelihood(&seq).unwrap(), 0.0);
    }

    #[test]
    fn log_likelihood_ignores_prompt_positions() {
        let m = two_token_model();
        let mut a = TokenSequence::prompt(&[0, 1, 0], 0);
        a.push_generated(1);
        let lp = m.log_prob(&[0, 1, 0], 1).unwrap();
        assert!((m.log_likelihood(&a).unwrap() - lp).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_is_order_sensitive() {
        let m = two_token_model();
        let mut a = TokenSequence::prompt(&[0], 0);
        a.push_generated(0);
        a.push_generated(1);
        let mut b = TokenSequence::prompt(&[0], 0);
        b.push_generated(1);
        b.push_generated(1);
        assert_ne!(m.log_likelihood(&a).unwrap(), m.log_likelihood(&b).unwrap());
    }

    #[test]
    fn short_sequence_rejected() {
        let m = two_token_model();
        assert!(m.log_likelihood(&TokenSequence::prompt(&[0], 0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ToyLm::random(&mut rng, 4, 2, 3, 2, 0.5);
        let json = m.to_json().unwrap();
        assert!(json.contains("\"format_version\":1"));
        assert_eq!(ToyLm::from_json(&json).unwrap(), m);
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let m = ToyLm::zeros(2, 1, 1, 1);
        let json = m.to_json().unwrap().replace("\"format_version\":1", "\"format_version\":7");
        assert!(ToyLm::from_json(&json).is_err());
    }

    #[test]
    fn forward_is_valid_distribution_for_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let m = ToyLm::random(&mut rng, 7, 3, 5, 4, 3.0);
            let d = m.next_distribution(&[0, 4, 6, 2, 1]).unwrap();
            assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
