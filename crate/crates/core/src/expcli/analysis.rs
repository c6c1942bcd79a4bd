//! Exact bias and fluency statistics of an intervened decoder, by enumerating
//! its generation distribution.

use serde::{Deserialize, Serialize};

use crate::attr::{AttributeClassifier, GroupProjector};
use crate::controller::{Decoder, InterventionConfig};
use crate::error::Result;
use crate::eval::{label_gender, perplexity, score_sentiment, LabelMode};
use crate::infoth::{enumerate, labeled_table, DecoderSource, LabelingFns, PromptComponent, COL_A, COL_A_JOINT, COL_G};
use crate::seqcore::{SamplingConfig, Task, TokenId, TokenSequence, Vocabulary};
use crate::toylm::ToyLm;

use super::world::{PromptRecord, ToyWorld};

/// Sentiment class of a generation: 0 negative, 1 neutral, 2 positive.
pub fn sentiment_class(seq: &TokenSequence, vocab: &Vocabulary) -> i64 {
    let s = score_sentiment(seq, vocab);
    if s > 0.5 {
        2
    } else if s < 0.5 {
        0
    } else {
        1
    }
}

/// Index of the group label among the vocabulary's groups; -1 for none.
pub fn group_code(label: Option<&str>, vocab: &Vocabulary) -> i64 {
    label
        .and_then(|l| vocab.groups().position(|g| g == l))
        .map_or(-1, |i| i as i64)
}

fn sequence(prompt: &[TokenId], generated: &[TokenId], bos: TokenId) -> TokenSequence {
    let mut s = TokenSequence::prompt(prompt, bos);
    for &t in generated {
        s.push_generated(t);
    }
    s
}

/// Exact summary of a method on a prompt mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactSummary {
    /// `I(g(x); a(x))`.
    pub mi_gen: f64,
    /// `I(g(x); a(c, x))`.
    pub mi_joint: f64,
    /// `H(a(c, x) | a(x))`.
    pub h_joint_given_gen: f64,
    /// Probability that the generation carries no group label.
    pub p_unlabeled: f64,
    /// Expected evaluator perplexity over generations at or below the
    /// sanitize threshold.
    pub expected_ppl: f64,
    /// Probability mass removed by sanitization.
    pub p_sanitized: f64,
    pub n_outcomes: usize,
}

/// The world's attribute machinery for a task.
pub fn attribute_models(world: &ToyWorld, task: Task) -> Result<(GroupProjector, AttributeClassifier)> {
    let emb = world.model.embeddings();
    Ok((
        GroupProjector::from_seeds(&world.vocab, emb, None)?,
        AttributeClassifier::for_task(&world.vocab, emb, task)?,
    ))
}

/// Enumerates the decoder on each prompt (equal weights) and computes the
/// exact statistics. Prompts are `(tokens, group)`.
#[allow(clippy::too_many_arguments)]
pub fn exact_summary(
    model: &ToyLm,
    eval_model: &ToyLm,
    vocab: &Vocabulary,
    projector: &GroupProjector,
    classifier: &AttributeClassifier,
    config: InterventionConfig,
    sampling: SamplingConfig,
    prompts: &[(Vec<TokenId>, Option<String>)],
    sanitize_threshold: f64,
) -> Result<ExactSummary> {
    let decoder = Decoder::new(model, vocab, projector, classifier, config, sampling)?;
    let mut parts = Vec::new();
    for (prompt, group) in prompts {
        let source = DecoderSource {
            decoder: &decoder,
            prompt: prompt.clone(),
            prompt_group: group.clone(),
        };
        parts.push(PromptComponent {
            prompt: prompt.clone(),
            weight: 1.0,
            joint: enumerate(&source)?,
        });
    }
    let labels = LabelingFns {
        g: Box::new(|x| sentiment_class(&sequence(&[vocab.bos()], x, vocab.bos()), vocab)),
        a: Box::new(|x| group_code(label_gender(&sequence(&[vocab.bos()], x, vocab.bos()), vocab, LabelMode::Gen).as_deref(), vocab)),
        a_joint: Box::new(|c, x| group_code(label_gender(&sequence(c, x, vocab.bos()), vocab, LabelMode::Joint).as_deref(), vocab)),
    };
    let table = labeled_table(&parts, &labels)?;

    let n = parts.len() as f64;
    let (mut ppl_mass, mut ppl_sum, mut sanitized, mut unlabeled) = (0.0, 0.0, 0.0, 0.0);
    for part in &parts {
        for (x, p) in part.joint.iter() {
            let p = p / n;
            let seq = sequence(&part.prompt, x, vocab.bos());
            if label_gender(&seq, vocab, LabelMode::Gen).is_none() {
                unlabeled += p;
            }
            let ppl = perplexity(&seq, eval_model)?;
            if ppl.is_finite() && ppl <= sanitize_threshold {
                ppl_mass += p;
                ppl_sum += p * ppl;
            } else {
                sanitized += p;
            }
        }
    }
    Ok(ExactSummary {
        mi_gen: table.mutual_info(&[COL_G], &[COL_A]),
        mi_joint: table.mutual_info(&[COL_G], &[COL_A_JOINT]),
        h_joint_given_gen: table.cond_entropy(&[COL_A_JOINT], &[COL_A]),
        p_unlabeled: unlabeled,
        expected_ppl: if ppl_mass > 0.0 { ppl_sum / ppl_mass } else { f64::NAN },
        p_sanitized: sanitized,
        n_outcomes: parts.iter().map(|p| p.joint.len()).sum(),
    })
}

/// Exact summary of a method in a toy world.
pub fn world_summary(
    world: &ToyWorld,
    task: Task,
    config: InterventionConfig,
    sampling: SamplingConfig,
    prompts: &[(Vec<TokenId>, Option<String>)],
    sanitize_threshold: f64,
) -> Result<ExactSummary> {
    let (projector, classifier) = attribute_models(world, task)?;
    exact_summary(
        &world.model,
        &world.eval_model,
        &world.vocab,
        &projector,
        &classifier,
        config,
        sampling,
        prompts,
        sanitize_threshold,
    )
}

/// Prompt records as `(tokens, group)` pairs.
pub fn prompt_pairs(prompts: &[PromptRecord]) -> Vec<(Vec<TokenId>, Option<String>)> {
    prompts
        .iter()
        .map(|p| (p.tokens.clone(), Some(p.group.clone())))
        .collect()
}
