//! Executable checks of the information-theoretic identities, the analytic
//! gradients and the controller's closed forms.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attr::{decay_weight, group_proxy, property_proxy, AttributeClassifier, GroupProjector};
use crate::controller::{adam_single_step, mix_distributions};
use crate::error::{LabError, Result};
use crate::infoth::{lemma_residual, proposition_check, random, theorem_check, CheckResult, Table};
use crate::seqcore::{NextTokenDistribution, Task, TokenId, Vocabulary};
use crate::toylm::{finite_difference_grad, max_relative_error, DistributionLoss, ToyLm, TunableDelta};

pub const LEMMA_TOL: f64 = 1e-9;
pub const THEOREM_TOL: f64 = 1e-10;
pub const SLACK_TOL: f64 = 1e-10;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
/// Gradient entries below this fraction of the largest entry are compared in
/// absolute terms against it.
pub const GRAD_REL_FLOOR: f64 = 1e-3;
/// Absolute floor covering finite-difference roundoff at loss values near
/// `-ln(1e-12)`.
pub const GRAD_ABS_FLOOR: f64 = 1e-4;

pub type LemmaFn = fn(&Table, usize, usize, &[usize], usize) -> Result<f64>;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub lemma_instances: usize,
    pub theorem_instances: usize,
    pub proposition_instances: usize,
    pub triangle_instances: usize,
    pub gradient_instances: usize,
    /// Implementation under test for the lemma sweep.
    pub lemma: LemmaFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            lemma_instances: 100,
            theorem_instances: 20,
            proposition_instances: 200,
            triangle_instances: 200,
            gradient_instances: 100,
            lemma: lemma_residual,
        }
    }
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn worst(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |acc: f64, v| if v.is_nan() { f64::NAN } else { acc.max(v) })
}

pub fn lemma_sweep(opts: &VerifyOptions) -> CheckResult {
    let mut rng = rng_for(opts.seed, 1);
    let mut residuals = Vec::new();
    for _ in 0..opts.lemma_instances {
        let v = rng.gen_range(2..=3);
        let t = rng.gen_range(2..=4);
        let table = random::sequence_table(&mut rng, v, t);
        let xs: Vec<usize> = (2..2 + t).collect();
        for step in 1..=t {
            residuals.push((opts.lemma)(&table, 0, 1, &xs, step).unwrap_or(f64::NAN));
        }
    }
    CheckResult::new("lemma_identity", opts.lemma_instances, worst(residuals.into_iter()), LEMMA_TOL)
}

pub fn theorem_sweep(opts: &VerifyOptions) -> CheckResult {
    let mut rng = rng_for(opts.seed, 2);
    let residual = worst((0..opts.theorem_instances).map(|_| {
        let v = rng.gen_range(2..=3);
        let table = random::interleaved_table(&mut rng, v, 4);
        let r = theorem_check(&table, 0, 1, &[2, 3, 4, 5]);
        r.max_condition.max(r.mi_ga.abs())
    }));
    CheckResult::new("theorem_interleaved", opts.theorem_instances, residual, THEOREM_TOL)
}

pub fn proposition_sweep(opts: &VerifyOptions) -> CheckResult {
    let mut rng = rng_for(opts.seed, 3);
    let residual = worst((0..opts.proposition_instances).map(|_| {
        (-proposition_check(&random::prompt_table(&mut rng)).slack).max(0.0)
    }));
    CheckResult::new("proposition_bound", opts.proposition_instances, residual, SLACK_TOL)
}

pub fn triangle_sweep(opts: &VerifyOptions) -> CheckResult {
    let mut rng = rng_for(opts.seed, 4);
    let residual = worst((0..opts.triangle_instances).map(|_| {
        let t = random::table(&mut rng, &[3, 3, 3]);
        let excess = t.vi_distance(&[0], &[2]) - t.vi_distance(&[0], &[1]) - t.vi_distance(&[1], &[2]);
        excess.max(0.0)
    }));
    CheckResult::new("vi_triangle", opts.triangle_instances, residual, SLACK_TOL)
}

/// Agreement of the entropy-identity and definitional forms of every
/// quantity, plus nonnegativity.
pub fn identity_sweep(opts: &VerifyOptions) -> CheckResult {
    let mut rng = rng_for(opts.seed, 5);
    let n = opts.lemma_instances;
    let residual = worst((0..n).map(|_| {
        let t = random::table(&mut rng, &[2, 3, 3]);
        let mi = t.mutual_info(&[0], &[1]);
        let cmi = t.cond_mutual_info(&[0], &[1], &[2]);
        [
            (mi - t.mutual_info_direct(&[0], &[1])).abs(),
            (cmi - t.cond_mutual_info_direct(&[0], &[1], &[2])).abs(),
            (t.cond_entropy(&[0], &[1]) - t.cond_entropy_direct(&[0], &[1])).abs(),
            (-mi).max(0.0),
            (-cmi).max(0.0),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }));
    CheckResult::new("information_identities", n, residual, IDENTITY_TOL)
}

/// Vocabulary of `n >= 8` tokens with two seed groups and all lexicons.
pub fn random_vocabulary(n: usize) -> Vocabulary {
    let tokens = (0..n).map(|i| format!("t{i}")).collect();
    let seeds = BTreeMap::from([
        ("female".to_string(), BTreeSet::from([2, 3])),
        ("male".to_string(), BTreeSet::from([4, 5])),
    ]);
    let lex = BTreeMap::from([
        ("sentiment".to_string(), BTreeMap::from([(6, 1.0), (7, 0.5), (8, -1.0), (9, -0.5)])),
        ("toxicity".to_string(), BTreeMap::from([(6, -1.0), (7, -0.5), (8, 0.9), (9, 0.6)])),
        ("regard_pos".to_string(), BTreeMap::from([(6, 1.0), (7, 1.0)])),
        ("regard_neg".to_string(), BTreeMap::from([(8, 1.0), (9, 1.0)])),
    ]);
    Vocabulary::new(tokens, 0, 1, seeds, lex).expect("valid by construction")
}

/// Relative gradient error with a floor proportional to the gradient scale.
pub fn gradient_error(analytic: &TunableDelta, numeric: &TunableDelta) -> f64 {
    let scale = analytic.flat().iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    max_relative_error(analytic, numeric, (GRAD_REL_FLOOR * scale).max(GRAD_ABS_FLOOR))
}

fn is_flat(scores: &[f64]) -> bool {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo < 1e-9
}

/// Largest gradient error over random (model, context, proxy) triples for
/// both proxies. Triples whose proxy is constant over the vocabulary have an
/// identically zero gradient and are redrawn.
pub fn gradient_sweep(opts: &VerifyOptions) -> Result<(f64, f64)> {
    let mut rng = rng_for(opts.seed, 6);
    let vocab = random_vocabulary(10);
    let (mut worst_g, mut worst_a) = (0.0f64, 0.0f64);
    let (mut done_g, mut done_a, mut draws) = (0, 0, 0usize);
    while done_g < opts.gradient_instances || done_a < opts.gradient_instances {
        draws += 1;
        if draws > 100 * opts.gradient_instances.max(1) {
            return Err(LabError::Budget("too many flat proxies in the gradient sweep".into()));
        }
        let d = rng.gen_range(3..=6);
        let h = rng.gen_range(2..=6);
        let k = rng.gen_range(1..=4);
        let model = ToyLm::random(&mut rng, vocab.len(), d, h, k, 1.0);
        let len = rng.gen_range(1..=5);
        let ctx: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..vocab.len())).collect();
        let task = Task::ALL[draws % 3];
        let mut delta = model.zero_delta();
        if rng.gen_bool(0.5) {
            for i in 0..delta.len() {
                *delta.flat_mut(i) = rng.gen_range(-0.5..0.5);
            }
        }
        let emb = model.embeddings();
        let projector = GroupProjector::from_seeds(&vocab, emb, None)?;
        let classifier = AttributeClassifier::for_task(&vocab, emb, task)?;
        let err = |loss: &dyn DistributionLoss| -> Result<f64> {
            let a = model.grad_tunable(&delta, &ctx, loss)?;
            let n = finite_difference_grad(&model, &delta, &ctx, loss, FD_STEP)?;
            Ok(gradient_error(&a, &n))
        };
        let lg = property_proxy(&classifier, &ctx, emb);
        if done_g < opts.gradient_instances && !is_flat(&lg.scores) {
            worst_g = worst_g.max(err(&lg)?);
            done_g += 1;
        }
        let la = group_proxy(&projector, &ctx, emb).combined();
        if done_a < opts.gradient_instances && !is_flat(&la.scores) {
            worst_a = worst_a.max(err(&la)?);
            done_a += 1;
        }
    }
    Ok((worst_g, worst_a))
}

/// Closed-form checks of mixing, decay weights and the single Adam step.
pub fn closed_forms() -> Result<Vec<CheckResult>> {
    let t = NextTokenDistribution::new(vec![0.8, 0.2])?;
    let b = NextTokenDistribution::new(vec![0.5, 0.5])?;
    let endpoints = (mix_distributions(&t, &b, 0.0)? != b) as u8 as f64
        + (mix_distributions(&t, &b, 1.0)? != t) as u8 as f64;
    let m = mix_distributions(&t, &b, 0.5)?;
    let mid = (m.prob(0) - 2.0 / 3.0).abs().max((m.prob(1) - 1.0 / 3.0).abs());
    let decay = (decay_weight(&[1.0, 2.0], 0.5).unwrap_or(f64::NAN) - 5.0 / 3.0).abs();
    let lr = 0.01;
    let g = TunableDelta {
        db1: vec![2.0, -0.5, 1e3],
        db2: vec![-3.0, 0.25],
    };
    let step = adam_single_step(&g, lr, 0.9, 0.999, 1e-8)?;
    let adam = step
        .flat()
        .iter()
        .map(|d| (d.abs() - lr).abs())
        .fold(0.0, f64::max);
    let sign_ok = step.flat().iter().zip(g.flat()).all(|(d, g)| d * g < 0.0);
    Ok(vec![
        CheckResult::new("mix_endpoints_exact", 2, endpoints, f64::MIN_POSITIVE),
        CheckResult::new("mix_midpoint", 1, mid, 1e-12),
        CheckResult::new("decay_weight", 1, decay, 1e-12),
        CheckResult::new("adam_single_step", 5, if sign_ok { adam } else { f64::INFINITY }, 1e-6),
    ])
}

/// Runs every check.
pub fn verify(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut out = vec![
        lemma_sweep(opts),
        theorem_sweep(opts),
        proposition_sweep(opts),
        triangle_sweep(opts),
        identity_sweep(opts),
    ];
    match gradient_sweep(opts) {
        Ok((g, a)) => {
            out.push(CheckResult::new("gradient_property_proxy", opts.gradient_instances, g, GRAD_TOL));
            out.push(CheckResult::new("gradient_group_proxy", opts.gradient_instances, a, GRAD_TOL));
        }
        Err(_) => out.push(CheckResult::new("gradient_checks", opts.gradient_instances, f64::NAN, GRAD_TOL)),
    }
    match closed_forms() {
        Ok(c) => out.extend(c),
        Err(_) => out.push(CheckResult::new("closed_forms", 0, f64::NAN, 1e-12)),
    }
    out
}

pub fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

/// The report as a JSON array of check results.
pub fn report_json(results: &[CheckResult]) -> Result<String> {
    Ok(serde_json::to_string_pretty(results)? + "\n")
}
