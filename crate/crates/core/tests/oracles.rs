//! Independent oracles: a dense eigensolver for the principal components, a
//! hand-scripted replay of the decoder, and Monte Carlo for exact
//! enumeration.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lidao_lab::attr::{principal_component, AttributeClassifier, Chosen, GroupProjector};
use lidao_lab::controller::{Decoder, InterventionConfig, Method, WEIGHT_FLOOR};
use lidao_lab::infoth::{enumerate, ModelSource};
use lidao_lab::seqcore::{SamplingConfig, Task, TokenId, Vocabulary};
use lidao_lab::toylm::{ToyLm, TunableDelta};

#[test]
fn principal_component_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let n = rng.gen_range(2..8);
        let d = rng.gen_range(2..6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = m.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let eig = SymmetricEigen::new(centered.transpose() * &centered);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let gap = eig.eigenvalues[order[0]] - eig.eigenvalues[order[1]];
        if gap < 1e-3 * eig.eigenvalues[order[0]] {
            continue;
        }
        let want = eig.eigenvectors.column(order[0]);
        let got = principal_component(&rows).unwrap();
        let cos: f64 = got.iter().zip(want.iter()).map(|(a, b)| a * b).sum();
        assert!((cos.abs() - 1.0).abs() < 1e-8, "cos {cos}");
        let lead = (0..d).max_by(|&a, &b| got[a].abs().total_cmp(&got[b].abs())).unwrap();
        assert!(got[lead] > 0.0);
    }
}

const FLOOR: f64 = 1e-12;
const FEMALE: [f64; 2] = [0.0, 1.0];
const MALE: [f64; 2] = [1.0, 0.0];
const NEGATIVE: [f64; 2] = [-0.6, 0.8];
const POSITIVE: [f64; 2] = [0.8, 0.6];

fn posterior(dirs: &[[f64; 2]], e: &[f64]) -> Vec<f64> {
    let n = (e[0] * e[0] + e[1] * e[1]).sqrt();
    let uniform = vec![1.0 / dirs.len() as f64; dirs.len()];
    if n == 0.0 {
        return uniform;
    }
    let c: Vec<f64> = dirs.iter().map(|d| ((d[0] * e[0] + d[1] * e[1]) / n).max(0.0)).collect();
    let t: f64 = c.iter().sum();
    if t <= 0.0 {
        uniform
    } else {
        c.iter().map(|x| x / t).collect()
    }
}

fn extended_mean(ctx: &[TokenId], v: TokenId, emb: &[Vec<f64>]) -> Vec<f64> {
    let n = (ctx.len() + 1) as f64;
    (0..2)
        .map(|j| (ctx.iter().map(|&c| emb[c][j]).sum::<f64>() + emb[v][j]) / n)
        .collect()
}

/// Per-token proxy scores, straight from their definitions.
fn scores(ctx: &[TokenId], emb: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let groups = [FEMALE, MALE];
    let lg = (0..emb.len())
        .map(|v| -posterior(&[NEGATIVE, POSITIVE], &extended_mean(ctx, v, emb))[1].max(FLOOR).ln())
        .collect();
    let la = (0..emb.len())
        .map(|v| {
            let q_tok = posterior(&groups, &emb[v]);
            let q_ext = posterior(&groups, &extended_mean(ctx, v, emb));
            let kl: f64 = q_ext
                .iter()
                .zip(&q_tok)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p.max(FLOOR) / q.max(FLOOR)).ln())
                .sum();
            let prior_term: f64 = q_tok
                .iter()
                .filter(|q| **q > 0.0)
                .map(|q| 0.5 * q * (q / 0.5).ln())
                .sum();
            kl + prior_term
        })
        .collect();
    (lg, la)
}

fn expectation(p: &[f64], s: &[f64]) -> f64 {
    p.iter().zip(s).map(|(a, b)| a * b).sum()
}

fn decay(history: &[f64], gamma: f64) -> f64 {
    if history.is_empty() {
        return 1.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (k, l) in history.iter().rev().enumerate() {
        let g = gamma.powi(k as i32 + 1);
        num += g * l;
        den += g;
    }
    (num / den).max(WEIGHT_FLOOR)
}

struct Expected {
    lg: f64,
    la: f64,
    wg: f64,
    wa: f64,
    chosen: Chosen,
    tuned: Vec<f64>,
    mixed: Vec<f64>,
}

/// One step of the min-based rule, computed by hand from the model's forward
/// pass.
fn scripted_step(model: &ToyLm, cfg: &InterventionConfig, ctx: &[TokenId], hist: &[(f64, f64)]) -> Expected {
    let emb = model.embeddings();
    let base = model.forward(&model.zero_delta(), ctx).unwrap();
    let p = base.dist.probs().to_vec();
    let (sg, sa) = scores(ctx, emb);
    let (lg, la) = (expectation(&p, &sg), expectation(&p, &sa));
    let wg = decay(&hist.iter().map(|h| h.0).collect::<Vec<_>>(), cfg.gamma);
    let wa = decay(&hist.iter().map(|h| h.1).collect::<Vec<_>>(), cfg.gamma);
    let (chosen, s, w) = if lg / wg <= la / wa {
        (Chosen::GOption, &sg, wg)
    } else {
        (Chosen::AOption, &sa, wa)
    };

    // d/dlogit_i of E_p[s]/w is p_i (s_i - E_p[s]) / w
    let mean = expectation(&p, s);
    let db2: Vec<f64> = p.iter().zip(s).map(|(pi, si)| pi * (si - mean) / w).collect();
    let db1: Vec<f64> = (0..model.hidden_dim())
        .map(|k| {
            let back: f64 = model.w2().iter().zip(&db2).map(|(row, g)| row[k] * g).sum();
            back * (1.0 - base.hidden[k] * base.hidden[k])
        })
        .collect();
    let eps = cfg.adam_eps;
    let adam = |g: &[f64]| g.iter().map(|g| -cfg.lr * g / (g.abs() + eps)).collect::<Vec<_>>();
    let delta = TunableDelta {
        db1: adam(&db1),
        db2: adam(&db2),
    };
    let tuned = model.forward(&delta, ctx).unwrap().dist.probs().to_vec();
    let w: Vec<f64> = tuned
        .iter()
        .zip(&p)
        .map(|(t, b)| t.powf(cfg.tau) * b.powf(1.0 - cfg.tau))
        .collect();
    let z: f64 = w.iter().sum();
    Expected {
        lg,
        la,
        wg,
        wa,
        chosen,
        tuned,
        mixed: w.iter().map(|x| x / z).collect(),
    }
}

fn three_token_setup(seed: u64) -> (ToyLm, Vocabulary, GroupProjector, AttributeClassifier) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ToyLm::random(&mut rng, 3, 2, 3, 2, 1.5);
    let vocab = Vocabulary::new(
        vec!["<bos>".into(), "<eos>".into(), "w".into()],
        0,
        1,
        BTreeMap::new(),
        BTreeMap::new(),
    )
    .unwrap();
    let projector = GroupProjector::new(
        vec!["female".into(), "male".into()],
        vec![FEMALE.to_vec(), MALE.to_vec()],
        vec![0.5, 0.5],
    )
    .unwrap();
    let classifier = AttributeClassifier::new(
        Task::Sentiment,
        vec!["negative".into(), "positive".into()],
        vec![NEGATIVE.to_vec(), POSITIVE.to_vec()],
        1,
    )
    .unwrap();
    (model, vocab, projector, classifier)
}

fn assert_close(a: &[f64], b: &[f64], what: &str) {
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12, "{what}: {a:?} vs {b:?}");
    }
}

#[test]
fn decoder_matches_scripted_oracle() {
    let sampling = SamplingConfig {
        coverage: 1.0,
        ..SamplingConfig::default()
    };
    for seed in 0..20 {
        let (model, vocab, projector, classifier) = three_token_setup(seed);
        let cfg = InterventionConfig {
            method: Method::LidaoMin,
            lr: 0.3,
            max_len: 2,
            ..InterventionConfig::default()
        };
        let decoder = Decoder::new(&model, &vocab, &projector, &classifier, cfg, sampling).unwrap();
        for script in [[2, 2], [2, 1], [1, 1]] {
            let mut state = decoder.initial_state(&[0], None);
            let mut hist = Vec::new();
            for &token in &script {
                if state.finished.is_some() {
                    break;
                }
                let got = decoder.step(&state).unwrap();
                let want = scripted_step(&model, &cfg, state.seq.ids(), &hist);
                let t = &got.trace;
                assert_close(&[t.lg, t.la, t.wg, t.wa], &[want.lg, want.la, want.wg, want.wa], "trace");
                assert_eq!(t.chosen, want.chosen);
                assert_close(got.tuned.probs(), &want.tuned, "tuned");
                assert_close(got.mixed.probs(), &want.mixed, "mixed");
                assert_close(got.sampling.probs(), &want.mixed, "sampling");
                hist.push((t.lg, t.la));
                state = decoder.advance(&state, token, got.trace);
            }
            assert!(state.trace.len() <= 2);
        }
    }
}

#[test]
fn generate_replays_step_by_step() {
    let (model, vocab, projector, classifier) = three_token_setup(4);
    let cfg = InterventionConfig {
        method: Method::LidaoMin,
        lr: 0.3,
        max_len: 2,
        ..InterventionConfig::default()
    };
    let decoder = Decoder::new(&model, &vocab, &projector, &classifier, cfg, SamplingConfig::default()).unwrap();
    for seed in 0..10 {
        let rec = decoder.generate(&[0], None, seed).unwrap();
        let mut state = decoder.initial_state(&[0], None);
        for &token in &rec.generated() {
            let out = decoder.step(&state).unwrap();
            assert!(out.sampling.prob(token) > 0.0);
            state = decoder.advance(&state, token, out.trace);
        }
        assert_eq!(state.trace, rec.trace);
        assert_eq!(state.seq, rec.output);
        assert_eq!(model, *decoder.model);
    }
}

#[test]
fn enumeration_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = ToyLm::random(&mut rng, 3, 3, 3, 2, 1.0);
    let source = ModelSource {
        model: &model,
        prompt: vec![0],
        eos: Some(1),
        max_len: 3,
    };
    let joint = enumerate(&source).unwrap();
    assert!((joint.total() - 1.0).abs() < 1e-12);

    const N: usize = 200_000;
    let mut counts: BTreeMap<Vec<TokenId>, usize> = BTreeMap::new();
    for _ in 0..N {
        let mut ctx = vec![0];
        let mut out = Vec::new();
        while out.len() < 3 {
            let d = model.next_distribution(&ctx).unwrap();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let tok = (0..3).find(|&i| {
                acc += d.prob(i);
                u < acc
            });
            let tok = tok.unwrap_or(2);
            out.push(tok);
            ctx.push(tok);
            if tok == 1 {
                break;
            }
        }
        *counts.entry(out).or_default() += 1;
    }
    let seen: BTreeSet<&Vec<TokenId>> = counts.keys().collect();
    for (x, p) in joint.iter() {
        let hat = counts.get(x).copied().unwrap_or(0) as f64 / N as f64;
        let sigma = (p * (1.0 - p) / N as f64).sqrt();
        assert!((hat - p).abs() <= 4.0 * sigma + 1e-12, "{x:?}: {hat} vs {p}");
    }
    assert!(seen.iter().all(|x| joint.prob_of(x) > 0.0));
}
