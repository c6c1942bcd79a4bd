//! Attribute machinery: group posteriors from seed-word principal components,
//! a prototype classifier for the global property, and the two per-step
//! proxies for the conditional mutual informations.
//!
//! Both proxies are expectations under the next-token distribution, so each
//! is returned as a [`LinearLoss`] with one score per candidate token.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seqcore::{NextTokenDistribution, Task, TokenId, Vocabulary};
use crate::toylm::{DistributionLoss, LinearLoss};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;
pub const PCA_TOLERANCE: f64 = 1e-10;
const PCA_MAX_ITERS: usize = 100_000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// First principal component of the mean-centered rows, by power iteration on
/// the scatter matrix. Unit norm, sign chosen so that the largest-magnitude
/// entry is positive.
pub fn principal_component(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    if rows.len() < 2 {
        return Err(LabError::DegenerateSeedSet(
            "need at least two embeddings".into(),
        ));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(LabError::Invalid("embeddings differ in dimension".into()));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let scale = centered.iter().map(|r| norm(r)).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(LabError::DegenerateSeedSet(
            "all embeddings are identical".into(),
        ));
    }
    let mut scatter = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                scatter[i][j] += r[i] * r[j];
            }
        }
    }
    let apply = |v: &[f64]| -> Vec<f64> { scatter.iter().map(|row| dot(row, v)).collect() };

    // deterministic, irregular start vector pushed through the scatter once so
    // that it lies in the column space
    let start: Vec<f64> = (0..d)
        .map(|j| 1.0 + ((j as f64 + 1.0) * 0.618_033_988_749_895).fract())
        .collect();
    let mut v = apply(&start);
    let mut vn = norm(&v);
    if vn == 0.0 {
        v = centered
            .iter()
            .max_by(|a, b| norm(a).total_cmp(&norm(b)))
            .cloned()
            .unwrap();
        vn = norm(&v);
    }
    v.iter_mut().for_each(|x| *x /= vn);

    let mut eig = 0.0;
    for _ in 0..PCA_MAX_ITERS {
        let w = apply(&v);
        let wn = norm(&w);
        if wn == 0.0 {
            break;
        }
        let next: Vec<f64> = w.iter().map(|x| x / wn).collect();
        let change = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let eig_change = (wn - eig).abs() / wn;
        v = next;
        eig = wn;
        if change < PCA_TOLERANCE && eig_change < PCA_TOLERANCE {
            break;
        }
    }
    fix_sign(&mut v);
    Ok(v)
}

fn fix_sign(v: &mut [f64]) {
    let idx = (0..v.len())
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
        .unwrap_or(0);
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Posterior over classes from clamped cosines against unit prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub q: Vec<f64>,
    /// True when the prior was returned because no cosine was positive.
    pub fell_back: bool,
    /// True when the query vector had zero norm.
    pub zero_norm: bool,
}

fn cosine_posterior(protos: &[Vec<f64>], prior: &[f64], e: &[f64]) -> Posterior {
    let en = norm(e);
    if en == 0.0 || !en.is_finite() {
        return Posterior {
            q: prior.to_vec(),
            fell_back: true,
            zero_norm: true,
        };
    }
    let clamped: Vec<f64> = protos.iter().map(|p| (dot(p, e) / en).max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return Posterior {
            q: prior.to_vec(),
            fell_back: true,
            zero_norm: false,
        };
    }
    Posterior {
        q: clamped.into_iter().map(|c| c / total).collect(),
        fell_back: false,
        zero_norm: false,
    }
}

fn mean_of(rows: &[&[f64]]) -> Vec<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r.iter()) {
            *a += b;
        }
    }
    let n = rows.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn check_prior(prior: &[f64], n: usize) -> Result<()> {
    if prior.len() != n {
        return Err(LabError::Invalid(format!(
            "prior has {} entries, expected {n}",
            prior.len()
        )));
    }
    if prior.iter().any(|p| !(*p > 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(LabError::Invalid("prior must be positive and sum to 1".into()));
    }
    Ok(())
}

/// Group directions `a_{k,v}` and the prior `p(a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProjector {
    pub groups: Vec<String>,
    pub pcs: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
}

impl GroupProjector {
    pub fn new(groups: Vec<String>, pcs: Vec<Vec<f64>>, prior: Vec<f64>) -> Result<Self> {
        if groups.len() != pcs.len() || groups.is_empty() {
            return Err(LabError::Invalid("one direction per group required".into()));
        }
        for pc in &pcs {
            if (norm(pc) - 1.0).abs() > 1e-9 {
                return Err(LabError::Invalid("group directions must be unit norm".into()));
            }
        }
        check_prior(&prior, groups.len())?;
        Ok(Self { groups, pcs, prior })
    }

    /// Principal components of each group's seed-word embeddings. `prior`
    /// defaults to uniform.
    pub fn from_seeds(
        vocab: &Vocabulary,
        embeddings: &[Vec<f64>],
        prior: Option<Vec<f64>>,
    ) -> Result<Self> {
        let mut groups = Vec::new();
        let mut pcs = Vec::new();
        for (group, seeds) in vocab.seed_sets() {
            let rows: Vec<Vec<f64>> = seeds.iter().map(|&id| embeddings[id].clone()).collect();
            let pc = principal_component(&rows).map_err(|e| match e {
                LabError::DegenerateSeedSet(msg) => {
                    LabError::DegenerateSeedSet(format!("group `{group}`: {msg}"))
                }
                other => other,
            })?;
            groups.push(group.clone());
            pcs.push(pc);
        }
        let k = groups.len();
        let prior = prior.unwrap_or_else(|| vec![1.0 / k as f64; k]);
        Self::new(groups, pcs, prior)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// `q(a | x_t)` from the token embedding.
    pub fn q_token(&self, e: &[f64]) -> Posterior {
        cosine_posterior(&self.pcs, &self.prior, e)
    }

    /// `q(a | x_<t+1)` from the running mean of the prefix embeddings.
    pub fn q_prefix(&self, prefix: &[&[f64]]) -> Posterior {
        self.q_token(&mean_of(prefix))
    }
}

/// Prototype classifier over the global-property classes of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeClassifier {
    pub task: Task,
    pub classes: Vec<String>,
    pub protos: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
    pub target: usize,
}

impl AttributeClassifier {
    pub fn new(task: Task, classes: Vec<String>, protos: Vec<Vec<f64>>, target: usize) -> Result<Self> {
        if classes.len() != protos.len() || classes.len() < 2 {
            return Err(LabError::Invalid("need a prototype per class, >= 2 classes".into()));
        }
        if target >= classes.len() {
            return Err(LabError::Invalid(format!("target class {target} out of range")));
        }
        for p in &protos {
            if (norm(p) - 1.0).abs() > 1e-9 {
                return Err(LabError::Invalid("prototypes must be unit norm".into()));
            }
        }
        let k = classes.len();
        Ok(Self {
            task,
            classes,
            protos,
            prior: vec![1.0 / k as f64; k],
            target,
        })
    }

    /// Class token sets for a task, taken from the lexicons. The second class
    /// is the target: positive sentiment, non-negative regard, non-toxic.
    pub fn class_tokens(vocab: &Vocabulary, task: Task) -> Result<[(String, Vec<TokenId>); 2]> {
        let lex = |name: &str| {
            vocab
                .lexicon(name)
                .ok_or_else(|| LabError::Invalid(format!("vocabulary lacks lexicon `{name}`")))
        };
        let pick = |l: &std::collections::BTreeMap<TokenId, f64>, positive: bool| {
            l.iter()
                .filter(|(_, v)| if positive { **v > 0.0 } else { **v < 0.0 })
                .map(|(k, _)| *k)
                .collect::<Vec<_>>()
        };
        Ok(match task {
            Task::Sentiment => {
                let l = lex("sentiment")?;
                [
                    ("negative".into(), pick(l, false)),
                    ("positive".into(), pick(l, true)),
                ]
            }
            Task::Regard => [
                ("negative".into(), pick(lex("regard_neg")?, true)),
                ("non_negative".into(), pick(lex("regard_pos")?, true)),
            ],
            Task::Toxicity => {
                let l = lex("toxicity")?;
                [
                    ("toxic".into(), pick(l, true)),
                    ("non_toxic".into(), pick(l, false)),
                ]
            }
        })
    }

    pub fn for_task(vocab: &Vocabulary, embeddings: &[Vec<f64>], task: Task) -> Result<Self> {
        let [(c0, t0), (c1, t1)] = Self::class_tokens(vocab, task)?;
        let proto = |name: &str, ids: &[TokenId]| {
            let rows: Vec<Vec<f64>> = ids.iter().map(|&id| embeddings[id].clone()).collect();
            principal_component(&rows).map_err(|e| {
                LabError::DegenerateSeedSet(format!("{} class `{name}`: {e}", task.name()))
            })
        };
        let protos = vec![proto(&c0, &t0)?, proto(&c1, &t1)?];
        Self::new(task, vec![c0, c1], protos, 1)
    }

    pub fn q(&self, e: &[f64]) -> Posterior {
        cosine_posterior(&self.protos, &self.prior, e)
    }
}

/// `KL(p || q)` with both arguments floored inside the logarithm.
pub fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum()
}

/// Running sum of the context embeddings, used to form extended-prefix means.
struct PrefixSum {
    sum: Vec<f64>,
    n: usize,
}

impl PrefixSum {
    fn new(context: &[TokenId], embeddings: &[Vec<f64>]) -> Self {
        let d = embeddings.first().map_or(0, Vec::len);
        let mut sum = vec![0.0; d];
        for &id in context {
            for (s, e) in sum.iter_mut().zip(&embeddings[id]) {
                *s += e;
            }
        }
        Self { sum, n: context.len() }
    }

    fn extended_mean(&self, e: &[f64]) -> Vec<f64> {
        let n = (self.n + 1) as f64;
        self.sum.iter().zip(e).map(|(s, x)| (s + x) / n).collect()
    }
}

/// Per-token scores of the group proxy: `(term1, term2)` parts.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupProxy {
    pub term1: LinearLoss,
    pub term2: LinearLoss,
    pub zero_norm: bool,
}

impl GroupProxy {
    pub fn combined(&self) -> LinearLoss {
        LinearLoss {
            scores: self
                .term1
                .scores
                .iter()
                .zip(&self.term2.scores)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

/// Scores of the group proxy for every candidate next token.
///
/// term1 for token `x` is `KL(q(a | context, x) || q(a | x))`; term2 is
/// `sum_k p(a=k) q(a=k | x) log(q(a=k | x) / p(a=k))`.
pub fn group_proxy(
    projector: &GroupProjector,
    context: &[TokenId],
    embeddings: &[Vec<f64>],
) -> GroupProxy {
    let prefix = PrefixSum::new(context, embeddings);
    let mut term1 = Vec::with_capacity(embeddings.len());
    let mut term2 = Vec::with_capacity(embeddings.len());
    let mut zero_norm = false;
    for e in embeddings {
        let q_tok = projector.q_token(e);
        let q_ext = projector.q_token(&prefix.extended_mean(e));
        zero_norm |= q_tok.zero_norm || q_ext.zero_norm;
        term1.push(kl_floored(&q_ext.q, &q_tok.q));
        let t2: f64 = projector
            .prior
            .iter()
            .zip(&q_tok.q)
            .filter(|(_, q)| **q > 0.0)
            .map(|(pa, q)| pa * q * (q / pa).ln())
            .sum();
        term2.push(t2);
    }
    GroupProxy {
        term1: LinearLoss { scores: term1 },
        term2: LinearLoss { scores: term2 },
        zero_norm,
    }
}

/// Group proxy value `term1 + term2` under `dist`.
pub fn loss_a(
    projector: &GroupProjector,
    dist: &NextTokenDistribution,
    context: &[TokenId],
    embeddings: &[Vec<f64>],
) -> f64 {
    group_proxy(projector, context, embeddings).combined().value(dist)
}

/// Per-token scores `-log q_g(target | context, x)`.
pub fn property_proxy(
    classifier: &AttributeClassifier,
    context: &[TokenId],
    embeddings: &[Vec<f64>],
) -> LinearLoss {
    let prefix = PrefixSum::new(context, embeddings);
    let scores = embeddings
        .iter()
        .map(|e| {
            let q = classifier.q(&prefix.extended_mean(e));
            -q.q[classifier.target].max(PROB_FLOOR).ln()
        })
        .collect();
    LinearLoss { scores }
}

/// Property proxy value under `dist`.
pub fn loss_g(
    classifier: &AttributeClassifier,
    dist: &NextTokenDistribution,
    context: &[TokenId],
    embeddings: &[Vec<f64>],
) -> f64 {
    property_proxy(classifier, context, embeddings).value(dist)
}

/// Discounted average of past losses, most recent weighted by `gamma`.
///
/// `history` is chronological. Returns `None` for an empty history.
pub fn decay_weight(history: &[f64], gamma: f64) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut g = 1.0;
    for l in history.iter().rev() {
        g *= gamma;
        num += l * g;
        den += g;
    }
    Some(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chosen {
    GOption,
    AOption,
    Product,
    Both,
    None,
}

/// One generated position's proxy values, weights and decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub lg: f64,
    pub la: f64,
    pub wg: f64,
    pub wa: f64,
    pub chosen: Chosen,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_norm: bool,
}

pub type LossTrace = Vec<StepTrace>;
