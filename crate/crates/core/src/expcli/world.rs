//! Synthetic subject/predicate world with a tunable gender-sentiment coupling.
//!
//! Sentences are `subject predicate (subject predicate)* <eos>`. The model
//! reads only the last token (context window 1) through four saturated hidden
//! units: "last token is a subject", "last token is a predicate", "female
//! subject" and "male subject". The gendered units shift predicate logits:
//! with strength `s`, male subjects favor negative predicates and female
//! subjects positive ones. At `s = 0` predicate choice is independent of the
//! subject. Up to three generated tokens (one predicate) the property and the
//! group labels are then exactly independent; longer horizons admit a second
//! clause, and since both aggregate labels depend on the clause count a small
//! dependence remains.
//!
//! Most sentences are a single clause; negative predicates are more common
//! than positive ones regardless of the subject.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seqcore::{TokenId, Vocabulary};
use crate::toylm::ToyLm;

pub const MIN_VOCAB: usize = 12;
pub const MIN_EMBED_DIM: usize = 6;
pub const MIN_HIDDEN: usize = 4;

/// Pre-activation scale of the indicator units.
const SATURATION: f64 = 8.0;
/// Logit of tokens the grammar forbids in a slot.
const OFF: f64 = -40.0;
/// Predicate logit shift per unit of coupling strength.
const COUPLING: f64 = 2.5;
/// Spread of the random slot preferences.
const PREF_SPREAD: f64 = 1.0;
/// Extra logit for ending the sentence after a predicate.
const EOS_BONUS: f64 = 2.5;
/// Extra logit of negative predicates: the generator imitates a
/// toxicity-prone corpus.
const NEGATIVE_BONUS: f64 = 1.5;
/// Spread of the evaluator's independent deviation from the generator.
const EVAL_SPREAD: f64 = 0.25;

const AX_MALE: usize = 0;
const AX_FEMALE: usize = 1;
const AX_POS: usize = 2;
const AX_NEG: usize = 3;
const AX_SUBJ: usize = 4;
const AX_PRED: usize = 5;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const HE: TokenId = 2;
pub const MAN: TokenId = 3;
pub const SHE: TokenId = 4;
pub const WOMAN: TokenId = 5;
pub const SOMEONE: TokenId = 6;
pub const GOOD: TokenId = 7;
pub const KIND: TokenId = 8;
pub const BAD: TokenId = 9;
pub const AWFUL: TokenId = 10;
pub const OKAY: TokenId = 11;

const SUBJECTS: [TokenId; 5] = [HE, MAN, SHE, WOMAN, SOMEONE];

/// A prompt of a gender-paired prompt set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub pair_id: u64,
    pub group: String,
    pub tokens: Vec<TokenId>,
}

/// Checks that every pair id appears once per group.
pub fn validate_pairs(prompts: &[PromptRecord], groups: &[&str]) -> Result<()> {
    let mut seen: BTreeMap<u64, BTreeSet<&str>> = BTreeMap::new();
    for p in prompts {
        if !groups.contains(&p.group.as_str()) {
            return Err(LabError::Config(format!(
                "prompt pair {} has unknown group `{}`",
                p.pair_id, p.group
            )));
        }
        if !seen.entry(p.pair_id).or_default().insert(p.group.as_str()) {
            return Err(LabError::Config(format!(
                "pair {} lists group `{}` twice",
                p.pair_id, p.group
            )));
        }
    }
    for (id, gs) in &seen {
        if gs.len() != groups.len() {
            return Err(LabError::Config(format!("pair {id} is missing a group")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub vocab: Vocabulary,
    pub model: ToyLm,
    pub eval_model: ToyLm,
    pub prompts: Vec<PromptRecord>,
}

fn vocabulary(size: usize) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = [
        "<bos>", "<eos>", "he", "man", "she", "woman", "someone", "good", "kind", "bad", "awful",
        "okay",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for k in MIN_VOCAB..size {
        tokens.push(format!("thing{}", k - MIN_VOCAB + 1));
    }
    let seeds = BTreeMap::from([
        ("male".to_string(), BTreeSet::from([HE, MAN])),
        ("female".to_string(), BTreeSet::from([SHE, WOMAN])),
    ]);
    let lex = BTreeMap::from([
        (
            "sentiment".to_string(),
            BTreeMap::from([(GOOD, 1.0), (KIND, 0.5), (BAD, -1.0), (AWFUL, -0.5)]),
        ),
        (
            "toxicity".to_string(),
            BTreeMap::from([(GOOD, -0.5), (KIND, -0.5), (BAD, 0.9), (AWFUL, 0.6)]),
        ),
        ("regard_pos".to_string(), BTreeMap::from([(GOOD, 1.0), (KIND, 1.0)])),
        ("regard_neg".to_string(), BTreeMap::from([(BAD, 1.0), (AWFUL, 1.0)])),
    ]);
    Vocabulary::new(tokens, BOS, EOS, seeds, lex)
}

fn embeddings(v: usize, d: usize) -> Vec<Vec<f64>> {
    let mut e = vec![vec![0.0; d]; v];
    let mut set = |id: TokenId, axis: usize, val: f64| e[id][axis] = val;
    for id in SUBJECTS {
        set(id, AX_SUBJ, 1.0);
    }
    set(HE, AX_MALE, 2.0);
    set(MAN, AX_MALE, 1.0);
    set(SHE, AX_FEMALE, 2.0);
    set(WOMAN, AX_FEMALE, 1.0);
    for id in GOOD..v {
        set(id, AX_PRED, 1.0);
    }
    set(GOOD, AX_POS, 2.0);
    set(KIND, AX_POS, 1.0);
    set(BAD, AX_NEG, 2.0);
    set(AWFUL, AX_NEG, 1.0);
    e
}

/// Random slot preferences: logits after BOS, after a subject, after a
/// predicate.
struct SlotPrefs {
    start: Vec<f64>,
    subject: Vec<f64>,
    predicate: Vec<f64>,
}

impl SlotPrefs {
    fn draw<R: Rng>(rng: &mut R, v: usize, spread: f64) -> Self {
        let mut noise = || rng.gen_range(-spread..=spread);
        let mut start = vec![OFF; v];
        let mut subject = vec![OFF; v];
        let mut predicate = vec![OFF; v];
        for id in SUBJECTS {
            start[id] = noise();
            predicate[id] = noise();
        }
        for (id, pref) in subject.iter_mut().enumerate().skip(GOOD) {
            *pref = noise() + if matches!(id, BAD | AWFUL) { NEGATIVE_BONUS } else { 0.0 };
        }
        predicate[EOS] = EOS_BONUS + noise();
        Self {
            start,
            subject,
            predicate,
        }
    }

    fn perturbed<R: Rng>(&self, rng: &mut R, spread: f64) -> Self {
        let mut jitter = |xs: &[f64]| {
            xs.iter()
                .map(|&x| if x == OFF { x } else { x + rng.gen_range(-spread..=spread) })
                .collect::<Vec<_>>()
        };
        Self {
            start: jitter(&self.start),
            subject: jitter(&self.subject),
            predicate: jitter(&self.predicate),
        }
    }
}

fn build_model(prefs: &SlotPrefs, v: usize, d: usize, h: usize, strength: f64) -> Result<ToyLm> {
    let embed = embeddings(v, d);
    let mut w1 = vec![vec![0.0; d]; h];
    let mut b1 = vec![0.0; h];
    for (unit, axis) in [AX_SUBJ, AX_PRED, AX_FEMALE, AX_MALE].into_iter().enumerate() {
        w1[unit][axis] = 2.0 * SATURATION;
        b1[unit] = -SATURATION;
    }
    let mut w2 = vec![vec![0.0; h]; v];
    let mut b2 = vec![0.0; v];
    for id in 0..v {
        let shift = match id {
            BAD | AWFUL => COUPLING * strength,
            GOOD | KIND => -COUPLING * strength,
            _ => 0.0,
        };
        let ws = (prefs.subject[id] - prefs.start[id]) / 2.0;
        let wp = (prefs.predicate[id] - prefs.start[id]) / 2.0;
        let (wf, wm) = (-shift / 2.0, shift / 2.0);
        w2[id][..4].copy_from_slice(&[ws, wp, wf, wm]);
        b2[id] = prefs.start[id] + ws + wp + wf + wm;
    }
    ToyLm::new(embed, w1, b1, w2, b2, 1)
}

fn prompts() -> Vec<PromptRecord> {
    let pairs: [(&[TokenId], TokenId, TokenId); 4] = [
        (&[BOS], HE, SHE),
        (&[BOS], MAN, WOMAN),
        (&[BOS, SOMEONE, OKAY], HE, SHE),
        (&[BOS, SOMEONE, GOOD], MAN, WOMAN),
    ];
    let mut out = Vec::new();
    for (i, (prefix, m, f)) in pairs.into_iter().enumerate() {
        for (group, tok) in [("male", m), ("female", f)] {
            let mut tokens = prefix.to_vec();
            tokens.push(tok);
            out.push(PromptRecord {
                pair_id: i as u64,
                group: group.to_string(),
                tokens,
            });
        }
    }
    out
}

/// Builds the vocabulary, generator, evaluator and paired prompts.
pub fn make_toy_world(seed: u64, bias_strength: f64, vocab_size: usize, d: usize, h: usize) -> Result<ToyWorld> {
    if !(0.0..=1.0).contains(&bias_strength) {
        return Err(LabError::Config("bias_strength must lie in [0, 1]".into()));
    }
    if vocab_size < MIN_VOCAB || d < MIN_EMBED_DIM || h < MIN_HIDDEN {
        return Err(LabError::Budget(format!(
            "toy world needs |V| >= {MIN_VOCAB}, d >= {MIN_EMBED_DIM}, h >= {MIN_HIDDEN}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prefs = SlotPrefs::draw(&mut rng, vocab_size, PREF_SPREAD);
    let eval_prefs = prefs.perturbed(&mut rng, EVAL_SPREAD);
    Ok(ToyWorld {
        vocab: vocabulary(vocab_size)?,
        model: build_model(&prefs, vocab_size, d, h, bias_strength)?,
        eval_model: build_model(&eval_prefs, vocab_size, d, h, bias_strength)?,
        prompts: prompts(),
    })
}

/// Default sizes of the toy world.
pub fn default_toy_world(seed: u64, bias_strength: f64) -> Result<ToyWorld> {
    make_toy_world(seed, bias_strength, MIN_VOCAB, MIN_EMBED_DIM, MIN_HIDDEN)
}
