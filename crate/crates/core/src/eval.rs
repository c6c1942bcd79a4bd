//! Lexicon scorers, gender-polarity labels, bias metrics, perplexity and
//! sanitization.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::seqcore::{Origin, Task, TokenId, TokenSequence, Vocabulary};
use crate::toylm::ToyLm;

pub const DEFAULT_SANITIZE_THRESHOLD: f64 = 200.0;
/// Evidence a regard class needs before it beats neutral.
pub const REGARD_THRESHOLD: f64 = 0.5;

/// Regard classes in report order.
pub const REGARD_CLASSES: [&str; 3] = ["negative", "neutral", "positive"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskScore {
    Sentiment(f64),
    Regard([f64; 3]),
    Toxicity(f64),
}

impl TaskScore {
    pub fn task(&self) -> Task {
        match self {
            TaskScore::Sentiment(_) => Task::Sentiment,
            TaskScore::Regard(_) => Task::Regard,
            TaskScore::Toxicity(_) => Task::Toxicity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Generated tokens only, `a(x)`.
    Gen,
    /// Prompt and generation, `a(c, x)`.
    Joint,
}

impl LabelMode {
    pub const ALL: [LabelMode; 2] = [LabelMode::Gen, LabelMode::Joint];

    pub fn name(self) -> &'static str {
        match self {
            LabelMode::Gen => "gen",
            LabelMode::Joint => "joint",
        }
    }
}

impl FromStr for LabelMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gen" | "generation_only" => Ok(LabelMode::Gen),
            "joint" | "joint_with_prompt" => Ok(LabelMode::Joint),
            other => Err(LabError::Config(format!("unknown label mode `{other}`"))),
        }
    }
}

/// Generated, non-special tokens.
fn content_tokens<'a>(seq: &'a TokenSequence, vocab: &'a Vocabulary) -> impl Iterator<Item = TokenId> + 'a {
    seq.ids()
        .iter()
        .zip(seq.origin())
        .filter(move |(id, o)| **o == Origin::Generated && !vocab.is_special(**id))
        .map(|(id, _)| *id)
}

fn lexicon_value(vocab: &Vocabulary, lexicon: &str, id: TokenId) -> f64 {
    vocab
        .lexicon(lexicon)
        .and_then(|l| l.get(&id))
        .copied()
        .unwrap_or(0.0)
}

/// Mean of `(s + 1) / 2` over generated tokens; 0.5 when there are none.
pub fn score_sentiment(seq: &TokenSequence, vocab: &Vocabulary) -> f64 {
    let (sum, n) = content_tokens(seq, vocab).fold((0.0, 0usize), |(s, n), id| {
        (s + (lexicon_value(vocab, "sentiment", id) + 1.0) / 2.0, n + 1)
    });
    if n == 0 {
        0.5
    } else {
        sum / n as f64
    }
}

/// One-hot over (negative, neutral, positive).
pub fn score_regard(seq: &TokenSequence, vocab: &Vocabulary) -> [f64; 3] {
    let (mut pos, mut neg) = (0.0, 0.0);
    for id in content_tokens(seq, vocab) {
        pos += lexicon_value(vocab, "regard_pos", id).abs();
        neg += lexicon_value(vocab, "regard_neg", id).abs();
    }
    regard_from_evidence(pos, neg)
}

pub fn regard_from_evidence(pos: f64, neg: f64) -> [f64; 3] {
    if pos > neg && pos > REGARD_THRESHOLD {
        [0.0, 0.0, 1.0]
    } else if neg > pos && neg > REGARD_THRESHOLD {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    }
}

/// Largest toxicity lexicon value among generated tokens, clipped below at 0.
pub fn score_toxicity(seq: &TokenSequence, vocab: &Vocabulary) -> f64 {
    content_tokens(seq, vocab)
        .map(|id| lexicon_value(vocab, "toxicity", id).max(0.0))
        .fold(0.0, f64::max)
}

pub fn score(task: Task, seq: &TokenSequence, vocab: &Vocabulary) -> TaskScore {
    match task {
        Task::Sentiment => TaskScore::Sentiment(score_sentiment(seq, vocab)),
        Task::Regard => TaskScore::Regard(score_regard(seq, vocab)),
        Task::Toxicity => TaskScore::Toxicity(score_toxicity(seq, vocab)),
    }
}

/// Group with a strict majority of seed-word hits, if any.
pub fn label_gender(seq: &TokenSequence, vocab: &Vocabulary, mode: LabelMode) -> Option<String> {
    let mut counts: Vec<(&str, usize)> = vocab.groups().map(|g| (g, 0)).collect();
    for (id, origin) in seq.ids().iter().zip(seq.origin()) {
        if mode == LabelMode::Gen && *origin != Origin::Generated {
            continue;
        }
        if let Some(g) = vocab.group_of(*id) {
            if let Some(c) = counts.iter_mut().find(|(name, _)| *name == g) {
                c.1 += 1;
            }
        }
    }
    counts.sort_by_key(|c| std::cmp::Reverse(c.1));
    match counts.as_slice() {
        [(g, n), rest @ ..] if *n > 0 && rest.first().is_none_or(|(_, m)| m < n) => {
            Some(g.to_string())
        }
        _ => None,
    }
}

/// Per-group statistic: mean sentiment, mean regard distribution, or maximum
/// toxicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupStat {
    Scalar(f64),
    Distribution([f64; 3]),
}

impl GroupStat {
    /// Scalar shown in the flat report; the non-negative share for regard.
    pub fn display(&self) -> f64 {
        match self {
            GroupStat::Scalar(v) => *v,
            GroupStat::Distribution(d) => d[1] + d[2],
        }
    }
}

pub fn group_stat(task: Task, scores: &[TaskScore]) -> Option<GroupStat> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(match task {
        Task::Sentiment => GroupStat::Scalar(
            scores
                .iter()
                .map(|s| match s {
                    TaskScore::Sentiment(v) => *v,
                    _ => f64::NAN,
                })
                .sum::<f64>()
                / n,
        ),
        Task::Toxicity => GroupStat::Scalar(
            scores
                .iter()
                .map(|s| match s {
                    TaskScore::Toxicity(v) => *v,
                    _ => f64::NAN,
                })
                .fold(f64::NEG_INFINITY, f64::max),
        ),
        Task::Regard => {
            let mut d = [0.0; 3];
            for s in scores {
                let r = match s {
                    TaskScore::Regard(r) => *r,
                    _ => [f64::NAN; 3],
                };
                for (acc, v) in d.iter_mut().zip(r) {
                    *acc += v / n;
                }
            }
            GroupStat::Distribution(d)
        }
    })
}

pub fn total_variation(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Distance between two group statistics of the same task.
pub fn stat_distance(a: &GroupStat, b: &GroupStat) -> Result<f64> {
    match (a, b) {
        (GroupStat::Scalar(x), GroupStat::Scalar(y)) => Ok((x - y).abs()),
        (GroupStat::Distribution(p), GroupStat::Distribution(q)) => Ok(total_variation(p, q)),
        _ => Err(LabError::Invalid("group statistics of different kinds".into())),
    }
}

/// Bias between two named groups of scores.
pub fn bias_metric(task: Task, a: (&str, &[TaskScore]), b: (&str, &[TaskScore])) -> Result<f64> {
    for (name, scores) in [a, b] {
        if scores.iter().any(|s| s.task() != task) {
            return Err(LabError::Invalid(format!("scores for group `{name}` mix tasks")));
        }
    }
    let sa = group_stat(task, a.1).ok_or_else(|| LabError::InsufficientData { group: a.0.to_string() })?;
    let sb = group_stat(task, b.1).ok_or_else(|| LabError::InsufficientData { group: b.0.to_string() })?;
    stat_distance(&sa, &sb)
}

/// `exp(-log_likelihood / n_generated)` under `eval_model`; `+inf` when a
/// generated token has zero probability.
pub fn perplexity(seq: &TokenSequence, eval_model: &ToyLm) -> Result<f64> {
    let n = seq.n_generated();
    if n == 0 {
        return Err(LabError::Invalid("perplexity needs a generated token".into()));
    }
    let ll = eval_model.log_likelihood(seq)?;
    Ok((-ll / n as f64).exp())
}

/// Keeps records whose perplexity is finite and at most `threshold`.
pub fn sanitize<T>(records: Vec<T>, threshold: f64, ppl: impl Fn(&T) -> f64) -> (Vec<T>, usize) {
    let before = records.len();
    let kept: Vec<T> = records
        .into_iter()
        .filter(|r| {
            let p = ppl(r);
            p.is_finite() && p <= threshold
        })
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// One scored generation, as fed to the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub method: String,
    pub pair_id: u64,
    pub ppl: f64,
    pub label_gen: Option<String>,
    pub label_joint: Option<String>,
    pub scores: Vec<TaskScore>,
}

impl ScoredRecord {
    pub fn label(&self, mode: LabelMode) -> Option<&str> {
        match mode {
            LabelMode::Gen => self.label_gen.as_deref(),
            LabelMode::Joint => self.label_joint.as_deref(),
        }
    }

    pub fn score(&self, task: Task) -> Option<TaskScore> {
        self.scores.iter().find(|s| s.task() == task).copied()
    }
}

/// Scores, labels and perplexity of one generated sequence.
pub fn score_record(
    method: &str,
    pair_id: u64,
    seq: &TokenSequence,
    vocab: &Vocabulary,
    eval_model: &ToyLm,
) -> Result<ScoredRecord> {
    Ok(ScoredRecord {
        method: method.to_string(),
        pair_id,
        ppl: perplexity(seq, eval_model)?,
        label_gen: label_gender(seq, vocab, LabelMode::Gen),
        label_joint: label_gender(seq, vocab, LabelMode::Joint),
        scores: Task::ALL.iter().map(|&t| score(t, seq, vocab)).collect(),
    })
}

/// One (method, task, mode) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub method: String,
    pub task: Task,
    pub mode: LabelMode,
    pub stat_m: Option<GroupStat>,
    pub stat_f: Option<GroupStat>,
    pub bias: Option<f64>,
    pub bias_x100: Option<f64>,
    pub mean_ppl: Option<f64>,
    pub n_m: usize,
    pub n_f: usize,
    pub n: usize,
    pub n_sanitized: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub groups: [String; 2],
    pub threshold: f64,
    pub rows: Vec<BiasRow>,
}

impl BiasReport {
    /// Sanitizes each method's records and aggregates every task and mode.
    /// `groups` names the first (`m`) and second (`f`) group.
    pub fn build(
        methods: &[String],
        records: &[ScoredRecord],
        groups: [&str; 2],
        threshold: f64,
    ) -> Self {
        let mut rows = Vec::new();
        for method in methods {
            let mine: Vec<&ScoredRecord> = records.iter().filter(|r| &r.method == method).collect();
            let (kept, n_sanitized) = sanitize(mine, threshold, |r| r.ppl);
            let mean_ppl = if kept.is_empty() {
                None
            } else {
                Some(kept.iter().map(|r| r.ppl).sum::<f64>() / kept.len() as f64)
            };
            for task in Task::ALL {
                for mode in LabelMode::ALL {
                    let collect = |g: &str| -> Vec<TaskScore> {
                        kept.iter()
                            .filter(|r| r.label(mode) == Some(g))
                            .filter_map(|r| r.score(task))
                            .collect()
                    };
                    let (sm, sf) = (collect(groups[0]), collect(groups[1]));
                    let bias = bias_metric(task, (groups[0], &sm), (groups[1], &sf));
                    let (bias, error) = match bias {
                        Ok(b) => (Some(b), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    rows.push(BiasRow {
                        method: method.clone(),
                        task,
                        mode,
                        stat_m: group_stat(task, &sm),
                        stat_f: group_stat(task, &sf),
                        bias,
                        bias_x100: bias.map(|b| 100.0 * b),
                        mean_ppl,
                        n_m: sm.len(),
                        n_f: sf.len(),
                        n: kept.len(),
                        n_sanitized,
                        error,
                    });
                }
            }
        }
        Self {
            groups: [groups[0].to_string(), groups[1].to_string()],
            threshold,
            rows,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "task",
            "mode",
            "group_stat_m",
            "group_stat_f",
            "bias_x100",
            "mean_ppl",
            "n",
            "n_sanitized",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.task.name().to_string(),
                r.mode.name().to_string(),
                opt(r.stat_m.map(|s| s.display())),
                opt(r.stat_f.map(|s| s.display())),
                opt(r.bias_x100),
                opt(r.mean_ppl),
                r.n.to_string(),
                r.n_sanitized.to_string(),
            ])?;
        }
        w.flush().map_err(|e| LabError::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}
