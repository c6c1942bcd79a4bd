//! Exact information theory on small discrete joints.
//!
//! Sequence sources are enumerated exhaustively into an [`ExactJoint`];
//! labeling the outcomes gives a [`Table`], on which entropies and (conditional)
//! mutual informations are exact finite sums. Every quantity is available both
//! through entropy identities and through its definitional sum.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{DecodeState, Decoder};
use crate::error::{LabError, Result};
use crate::seqcore::{NextTokenDistribution, TokenId};
use crate::toylm::ToyLm;

/// Largest `|V|^T` accepted by [`enumerate`].
pub const ENUMERATION_BUDGET: f64 = 1e7;
/// Outcomes below this probability are dropped during enumeration.
pub const PRUNE_BELOW: f64 = 1e-15;

/// Anything that assigns next-token distributions to prefixes.
pub trait SequenceSource {
    type State: Clone;

    fn alphabet_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn start(&self) -> Result<Self::State>;
    /// Children of a non-terminal state with their conditional probabilities.
    fn expand(&self, state: &Self::State) -> Result<Vec<(f64, Self::State)>>;
    fn is_terminal(&self, state: &Self::State) -> bool;
    /// Generated tokens of a state.
    fn outcome(&self, state: &Self::State) -> Vec<TokenId>;
}

fn children<S: Clone>(
    dist: &NextTokenDistribution,
    mut step: impl FnMut(TokenId) -> S,
) -> Vec<(f64, S)> {
    dist.support().map(|t| (dist.prob(t), step(t))).collect()
}

/// A base model sampled without intervention or sampling transforms.
#[derive(Debug, Clone)]
pub struct ModelSource<'a> {
    pub model: &'a ToyLm,
    pub prompt: Vec<TokenId>,
    pub eos: Option<TokenId>,
    pub max_len: usize,
}

impl SequenceSource for ModelSource<'_> {
    type State = Vec<TokenId>;

    fn alphabet_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn start(&self) -> Result<Self::State> {
        if self.prompt.is_empty() {
            return Err(LabError::Invalid("prompt must be nonempty".into()));
        }
        Ok(self.prompt.clone())
    }

    fn expand(&self, state: &Self::State) -> Result<Vec<(f64, Self::State)>> {
        let dist = self.model.next_distribution(state)?;
        Ok(children(&dist, |t| {
            let mut s = state.clone();
            s.push(t);
            s
        }))
    }

    fn is_terminal(&self, state: &Self::State) -> bool {
        let n = state.len() - self.prompt.len();
        n >= self.max_len || (n > 0 && self.eos == state.last().copied())
    }

    fn outcome(&self, state: &Self::State) -> Vec<TokenId> {
        state[self.prompt.len()..].to_vec()
    }
}

/// A process given directly by its conditionals over generated prefixes.
pub struct FnSource<F> {
    pub alphabet: usize,
    pub max_len: usize,
    pub eos: Option<TokenId>,
    pub conditional: F,
}

impl<F> SequenceSource for FnSource<F>
where
    F: Fn(&[TokenId]) -> Result<NextTokenDistribution>,
{
    type State = Vec<TokenId>;

    fn alphabet_size(&self) -> usize {
        self.alphabet
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn start(&self) -> Result<Self::State> {
        Ok(Vec::new())
    }

    fn expand(&self, state: &Self::State) -> Result<Vec<(f64, Self::State)>> {
        let dist = (self.conditional)(state)?;
        if dist.len() != self.alphabet {
            return Err(LabError::Invalid("conditional has the wrong alphabet size".into()));
        }
        Ok(children(&dist, |t| {
            let mut s = state.clone();
            s.push(t);
            s
        }))
    }

    fn is_terminal(&self, state: &Self::State) -> bool {
        state.len() >= self.max_len || (!state.is_empty() && self.eos == state.last().copied())
    }

    fn outcome(&self, state: &Self::State) -> Vec<TokenId> {
        state.clone()
    }
}

/// A full intervened decoder from a fixed prompt, enumerated through the final
/// sampling distribution of each step.
pub struct DecoderSource<'d, 'a> {
    pub decoder: &'d Decoder<'a>,
    pub prompt: Vec<TokenId>,
    pub prompt_group: Option<String>,
}

impl SequenceSource for DecoderSource<'_, '_> {
    type State = DecodeState;

    fn alphabet_size(&self) -> usize {
        self.decoder.model.vocab_size()
    }

    fn max_len(&self) -> usize {
        self.decoder.config.max_len
    }

    fn start(&self) -> Result<Self::State> {
        Ok(self
            .decoder
            .initial_state(&self.prompt, self.prompt_group.as_deref()))
    }

    fn expand(&self, state: &Self::State) -> Result<Vec<(f64, Self::State)>> {
        let out = self.decoder.step(state)?;
        Ok(children(&out.sampling, |t| {
            self.decoder.advance(state, t, out.trace.clone())
        }))
    }

    fn is_terminal(&self, state: &Self::State) -> bool {
        state.finished.is_some()
    }

    fn outcome(&self, state: &Self::State) -> Vec<TokenId> {
        state.seq.generated_ids()
    }
}

/// Exact distribution over the generated sequences of a source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactJoint {
    pub outcomes: Vec<Vec<TokenId>>,
    pub probs: Vec<f64>,
    /// Mass removed by pruning before renormalization.
    pub pruned_mass: f64,
}

impl ExactJoint {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[TokenId], f64)> {
        self.outcomes
            .iter()
            .map(Vec::as_slice)
            .zip(self.probs.iter().copied())
    }

    pub fn prob_of(&self, seq: &[TokenId]) -> f64 {
        self.iter()
            .filter(|(s, _)| *s == seq)
            .map(|(_, p)| p)
            .sum()
    }

    /// Joint of the labels computed from each outcome.
    pub fn table(&self, label: impl Fn(&[TokenId]) -> Vec<i64>) -> Result<Table> {
        Table::from_rows(self.iter().map(|(s, p)| (label(s), p)))
    }

    /// Expectation of `f` over outcomes.
    pub fn expect(&self, f: impl Fn(&[TokenId]) -> f64) -> f64 {
        self.iter().map(|(s, p)| p * f(s)).sum()
    }
}

/// Exhaustive depth-first enumeration of `source`.
pub fn enumerate<S: SequenceSource>(source: &S) -> Result<ExactJoint> {
    let size = (source.alphabet_size() as f64).powi(source.max_len() as i32);
    if size > ENUMERATION_BUDGET {
        return Err(LabError::Budget(format!(
            "|V|^T = {}^{} exceeds {ENUMERATION_BUDGET:e}",
            source.alphabet_size(),
            source.max_len()
        )));
    }
    let mut outcomes = Vec::new();
    let mut probs = Vec::new();
    let mut pruned = 0.0;
    let mut stack = vec![(1.0, source.start()?)];
    while let Some((p, state)) = stack.pop() {
        if source.is_terminal(&state) {
            outcomes.push(source.outcome(&state));
            probs.push(p);
            continue;
        }
        let kids = source.expand(&state)?;
        // Reverse so that lower token ids are visited first.
        for (q, child) in kids.into_iter().rev() {
            let pc = p * q;
            if pc < PRUNE_BELOW {
                pruned += pc;
            } else {
                stack.push((pc, child));
            }
        }
    }
    if pruned > 0.0 {
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
    }
    Ok(ExactJoint {
        outcomes,
        probs,
        pruned_mass: pruned,
    })
}

/// One prompt of a prompt-conditioned joint.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptComponent {
    pub prompt: Vec<TokenId>,
    pub weight: f64,
    pub joint: ExactJoint,
}

/// Label of a generation.
pub type GenLabel<'a> = Box<dyn Fn(&[TokenId]) -> i64 + 'a>;
/// Label of a (prompt, generation) pair.
pub type JointLabel<'a> = Box<dyn Fn(&[TokenId], &[TokenId]) -> i64 + 'a>;

/// Labelers for the property, the generation-only group and the
/// prompt-aware group.
pub struct LabelingFns<'a> {
    pub g: GenLabel<'a>,
    pub a: GenLabel<'a>,
    pub a_joint: JointLabel<'a>,
}

/// Columns of a labeled prompt-conditioned table.
pub const COL_G: usize = 0;
pub const COL_A: usize = 1;
pub const COL_A_JOINT: usize = 2;

/// Table over `(g, a, a_joint)` of a mixture of prompts.
pub fn labeled_table(parts: &[PromptComponent], labels: &LabelingFns) -> Result<Table> {
    let total: f64 = parts.iter().map(|c| c.weight).sum();
    if !(total > 0.0) || parts.iter().any(|c| c.weight < 0.0) {
        return Err(LabError::Invalid("prompt weights must be nonnegative with positive sum".into()));
    }
    let rows = parts.iter().flat_map(|c| {
        c.joint.iter().map(move |(x, p)| {
            (
                vec![(labels.g)(x), (labels.a)(x), (labels.a_joint)(&c.prompt, x)],
                c.weight / total * p,
            )
        })
    });
    Table::from_rows(rows)
}

/// A joint distribution over integer-valued variables (the columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    arity: usize,
    rows: BTreeMap<Vec<i64>, f64>,
}

fn xlogx_sum<'a>(ps: impl Iterator<Item = &'a f64>) -> f64 {
    -ps.filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

impl Table {
    /// Merges duplicate rows. Probabilities must be nonnegative and sum to one
    /// within `1e-9`.
    pub fn from_rows(rows: impl IntoIterator<Item = (Vec<i64>, f64)>) -> Result<Self> {
        let mut map: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
        let mut arity = None;
        for (k, p) in rows {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(LabError::Invalid(format!("bad probability {p}")));
            }
            match arity {
                None => arity = Some(k.len()),
                Some(a) if a != k.len() => {
                    return Err(LabError::Invalid("rows of different arity".into()))
                }
                _ => {}
            }
            if p > 0.0 {
                *map.entry(k).or_insert(0.0) += p;
            }
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(LabError::Invalid(format!("table mass {total} differs from 1")));
        }
        Ok(Self {
            arity: arity.unwrap_or(0),
            rows: map,
        })
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[i64], f64)> {
        self.rows.iter().map(|(k, p)| (k.as_slice(), *p))
    }

    pub fn marginal(&self, cols: &[usize]) -> BTreeMap<Vec<i64>, f64> {
        let mut out = BTreeMap::new();
        for (k, p) in &self.rows {
            *out.entry(project(k, cols)).or_insert(0.0) += p;
        }
        out
    }

    pub fn entropy(&self, cols: &[usize]) -> f64 {
        if cols.is_empty() {
            return 0.0;
        }
        xlogx_sum(self.marginal(cols).values())
    }

    /// `I(X;Y) = H(X) + H(Y) - H(X,Y)`.
    pub fn mutual_info(&self, x: &[usize], y: &[usize]) -> f64 {
        self.entropy(x) + self.entropy(y) - self.entropy(&cat(&[x, y]))
    }

    /// `I(X;Y|Z) = H(X,Z) + H(Y,Z) - H(X,Y,Z) - H(Z)`.
    pub fn cond_mutual_info(&self, x: &[usize], y: &[usize], z: &[usize]) -> f64 {
        self.entropy(&cat(&[x, z])) + self.entropy(&cat(&[y, z]))
            - self.entropy(&cat(&[x, y, z]))
            - self.entropy(z)
    }

    /// `H(X|Y) = H(X,Y) - H(Y)`.
    pub fn cond_entropy(&self, x: &[usize], y: &[usize]) -> f64 {
        self.entropy(&cat(&[x, y])) - self.entropy(y)
    }

    /// `sum p(x,y) ln(p(x,y) / (p(x) p(y)))`.
    pub fn mutual_info_direct(&self, x: &[usize], y: &[usize]) -> f64 {
        self.cond_mutual_info_direct(x, y, &[])
    }

    /// `sum p(x,y,z) ln(p(x,y,z) p(z) / (p(x,z) p(y,z)))`.
    pub fn cond_mutual_info_direct(&self, x: &[usize], y: &[usize], z: &[usize]) -> f64 {
        let (xz, yz) = (cat(&[x, z]), cat(&[y, z]));
        let xyz = cat(&[x, y, z]);
        let (m_xz, m_yz, m_z) = (self.marginal(&xz), self.marginal(&yz), self.marginal(z));
        self.marginal(&xyz)
            .iter()
            .map(|(k, p)| {
                let key = |cols: &[usize]| {
                    cols.iter()
                        .map(|c| k[xyz.iter().position(|v| v == c).expect("column present")])
                        .collect::<Vec<_>>()
                };
                let pz = m_z[&key(z)];
                p * (p * pz / (m_xz[&key(&xz)] * m_yz[&key(&yz)])).ln()
            })
            .sum()
    }

    /// `-sum p(x,y) ln(p(x,y) / p(y))`.
    pub fn cond_entropy_direct(&self, x: &[usize], y: &[usize]) -> f64 {
        let xy = cat(&[x, y]);
        let m_y = self.marginal(y);
        -self
            .marginal(&xy)
            .iter()
            .map(|(k, p)| p * (p / m_y[&k[x.len()..].to_vec()]).ln())
            .sum::<f64>()
    }

    /// Variation of information `H(X) + H(Y) - 2 I(X;Y)`.
    pub fn vi_distance(&self, x: &[usize], y: &[usize]) -> f64 {
        self.entropy(x) + self.entropy(y) - 2.0 * self.mutual_info(x, y)
    }
}

fn project(k: &[i64], cols: &[usize]) -> Vec<i64> {
    cols.iter().map(|&c| k[c]).collect()
}

fn cat(parts: &[&[usize]]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for p in parts {
        for c in *p {
            if !out.contains(c) {
                out.push(*c);
            }
        }
    }
    out
}

/// Shannon entropy in nats.
pub fn entropy(dist: &[f64]) -> f64 {
    xlogx_sum(dist.iter())
}

/// Both sides of the chain-rule identity for the change of `I(g;a|x_<t)`
/// when `x_t` is revealed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaTerms {
    pub lhs: f64,
    pub rhs: f64,
}

impl LemmaTerms {
    pub fn residual(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

/// `t` is 1-based; `xs[t-1]` is the column of `x_t`.
pub fn lemma_terms(table: &Table, g: usize, a: usize, xs: &[usize], t: usize) -> Result<LemmaTerms> {
    if t == 0 || t > xs.len() {
        return Err(LabError::Invalid(format!("step {t} outside 1..={}", xs.len())));
    }
    let before = &xs[..t - 1];
    let upto = &xs[..t];
    let xt = &xs[t - 1..t];
    let lhs = table.cond_mutual_info(&[g], &[a], upto) - table.cond_mutual_info(&[g], &[a], before);
    let rhs = table.cond_mutual_info(&[g], xt, &cat(&[before, &[a]]))
        - table.cond_mutual_info(&[g], xt, before);
    Ok(LemmaTerms { lhs, rhs })
}

pub fn lemma_residual(table: &Table, g: usize, a: usize, xs: &[usize], t: usize) -> Result<f64> {
    Ok(lemma_terms(table, g, a, xs, t)?.residual())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    /// `min(I(g; x_t | x_<t), I(a; x_t | x_<t))` for every step.
    pub per_step: Vec<f64>,
    pub max_condition: f64,
    pub mi_ga: f64,
}

pub fn theorem_check(table: &Table, g: usize, a: usize, xs: &[usize]) -> TheoremReport {
    let per_step: Vec<f64> = (0..xs.len())
        .map(|i| {
            let (before, xt) = (&xs[..i], &xs[i..=i]);
            table
                .cond_mutual_info(&[g], xt, before)
                .min(table.cond_mutual_info(&[a], xt, before))
        })
        .collect();
    TheoremReport {
        max_condition: per_step.iter().copied().fold(0.0, f64::max),
        per_step,
        mi_ga: table.mutual_info(&[g], &[a]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
}

/// `I(g; a_joint) <= I(g; a) + H(a_joint | a)` on a table over
/// `(g, a, a_joint)` columns.
pub fn proposition_check(table: &Table) -> PropositionReport {
    let lhs = table.mutual_info(&[COL_G], &[COL_A_JOINT]);
    let rhs = table.mutual_info(&[COL_G], &[COL_A]) + table.cond_entropy(&[COL_A_JOINT], &[COL_A]);
    PropositionReport {
        lhs,
        rhs,
        slack: rhs - lhs,
    }
}

/// One entry of a verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_name: String,
    pub instances: usize,
    pub max_residual: f64,
    pub pass: bool,
}

impl CheckResult {
    pub fn new(name: &str, instances: usize, max_residual: f64, tolerance: f64) -> Self {
        Self {
            check_name: name.to_string(),
            instances,
            max_residual,
            pass: max_residual.is_finite() && max_residual < tolerance,
        }
    }
}

/// Random instances for the sweeps.
pub mod random {
    use super::*;

    /// Random weights with roughly one cell in five set to zero.
    fn sparse_weights<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() })
            .collect();
        if w.iter().all(|v| *v == 0.0) {
            w[rng.gen_range(0..n)] = 1.0;
        }
        w
    }

    fn odometer(arities: &[usize]) -> Vec<Vec<i64>> {
        let mut out = vec![Vec::new()];
        for &k in arities {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k as i64).map(move |v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Random joint over variables with the given alphabet sizes.
    pub fn table<R: Rng + ?Sized>(rng: &mut R, arities: &[usize]) -> Table {
        let keys = odometer(arities);
        let w = sparse_weights(rng, keys.len());
        let total: f64 = w.iter().sum();
        Table::from_rows(keys.into_iter().zip(w.into_iter().map(|v| v / total)))
            .expect("normalized by construction")
    }

    /// Random joint over `(g, a, x_1..x_T)` with `|V| = v`; g and a binary.
    pub fn sequence_table<R: Rng + ?Sized>(rng: &mut R, v: usize, t: usize) -> Table {
        let mut arities = vec![2, 2];
        arities.extend(std::iter::repeat_n(v, t));
        table(rng, &arities)
    }

    /// Random prompt-conditioned joint with random labelers, as a table over
    /// `(g, a, a_joint)`.
    pub fn prompt_table<R: Rng + ?Sized>(rng: &mut R) -> Table {
        let n_prompts = rng.gen_range(2..=3);
        let n_seq = rng.gen_range(3..=6);
        let labels = 3;
        let g: Vec<i64> = (0..n_seq).map(|_| rng.gen_range(0..labels)).collect();
        let a: Vec<i64> = (0..n_seq).map(|_| rng.gen_range(0..labels)).collect();
        let a_joint: Vec<Vec<i64>> = (0..n_prompts)
            .map(|_| (0..n_seq).map(|_| rng.gen_range(0..labels)).collect())
            .collect();
        let w = sparse_weights(rng, n_prompts * n_seq);
        let total: f64 = w.iter().sum();
        let rows = (0..n_prompts).flat_map(|c| {
            let (g, a, a_joint, w) = (&g, &a, &a_joint, &w);
            (0..n_seq).map(move |x| (vec![g[x], a[x], a_joint[c][x]], w[c * n_seq + x] / total))
        });
        Table::from_rows(rows).expect("normalized by construction")
    }

    /// Interleaved process: odd steps depend only on odd history, even steps
    /// only on even history; `g` labels the odd subsequence and `a` the even
    /// one. Columns are `(g, a, x_1..x_T)`.
    pub fn interleaved_table<R: Rng + ?Sized>(rng: &mut R, v: usize, t: usize) -> Table {
        let mut conditionals: HashMap<(usize, Vec<TokenId>), Vec<f64>> = HashMap::new();
        let mut g_label: HashMap<Vec<TokenId>, i64> = HashMap::new();
        let mut a_label: HashMap<Vec<TokenId>, i64> = HashMap::new();
        let mut rows = Vec::new();
        let parity = |seq: &[TokenId], odd: bool| -> Vec<TokenId> {
            seq.iter()
                .enumerate()
                .filter(|(i, _)| (i % 2 == 0) == odd)
                .map(|(_, x)| *x)
                .collect()
        };
        for key in odometer(&vec![v; t]) {
            let seq: Vec<TokenId> = key.iter().map(|&x| x as TokenId).collect();
            let mut p = 1.0;
            for i in 0..t {
                // position i + 1 is odd when i is even
                let hist = parity(&seq[..i], i % 2 == 0);
                let cond = conditionals.entry((i, hist)).or_insert_with(|| {
                    let w = sparse_weights(rng, v);
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / s).collect()
                });
                p *= cond[seq[i]];
            }
            let g = *g_label
                .entry(parity(&seq, true))
                .or_insert_with(|| rng.gen_range(0..2));
            let a = *a_label
                .entry(parity(&seq, false))
                .or_insert_with(|| rng.gen_range(0..2));
            let mut row = vec![g, a];
            row.extend(key);
            rows.push((row, p));
        }
        Table::from_rows(rows).expect("chain-rule probabilities sum to one")
    }

    /// Every position copies `x_1`, uniform over `v`; `g = a = x_1`.
    pub fn coupled_table(v: usize, t: usize) -> Table {
        let rows = (0..v as i64).map(|x| {
            let mut row = vec![x, x];
            row.extend(std::iter::repeat_n(x, t));
            (row, 1.0 / v as f64)
        });
        Table::from_rows(rows).expect("uniform")
    }
}
