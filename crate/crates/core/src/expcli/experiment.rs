//! Generation sweeps over methods, prompts and continuations, and the report
//! files they produce.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attr::{AttributeClassifier, Chosen, GroupProjector};
use crate::controller::{Decoder, GenerationRecord, Method, Termination};
use crate::error::{LabError, Result};
use crate::eval::{score_record, BiasReport, LabelMode, ScoredRecord};
use crate::infoth::{Table, ENUMERATION_BUDGET};
use crate::seqcore::{TokenId, TokenSequence, Vocabulary};
use crate::toylm::ToyLm;

use super::analysis::{exact_summary, group_code, prompt_pairs, sentiment_class, ExactSummary};
use super::config::ExperimentConfig;
use super::world::{validate_pairs, PromptRecord};

/// Env var capping the worker pool.
pub const THREADS_ENV: &str = "LIDAO_LAB_THREADS";

pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const INFOTH_FILE: &str = "infoth_summary.json";

/// Per-step record fields kept in the generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub lg: f64,
    pub la: f64,
    pub wg: f64,
    pub wa: f64,
    pub chosen: Chosen,
}

/// One line of the generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLine {
    pub pair_id: u64,
    pub group_prompt: String,
    pub method: Method,
    pub continuation: usize,
    pub prompt_ids: Vec<TokenId>,
    pub token_ids: Vec<TokenId>,
    pub text: String,
    pub ppl: Option<f64>,
    pub terminated_by: Termination,
    pub steps: Vec<StepLine>,
}

impl GenerationLine {
    pub fn sequence(&self, bos: TokenId) -> TokenSequence {
        let mut s = TokenSequence::prompt(&self.prompt_ids, bos);
        for &t in &self.token_ids {
            s.push_generated(t);
        }
        s
    }
}

/// A work unit that raised an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub pair_id: u64,
    pub group_prompt: String,
    pub method: Method,
    pub continuation: usize,
    pub error: String,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one generation, a pure function of its coordinates.
pub fn record_seed(global_seed: u64, method: Method, pair_id: u64, continuation: usize) -> u64 {
    [fnv1a(method.name().as_bytes()), pair_id, continuation as u64]
        .into_iter()
        .fold(splitmix(global_seed), |acc, x| splitmix(acc ^ x))
}

/// Reads a JSON-lines file of `T`, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            LabError::Config(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

/// Loaded inputs of an experiment.
pub struct Inputs {
    pub model: ToyLm,
    pub eval_model: ToyLm,
    pub vocab: Vocabulary,
    pub prompts: Vec<PromptRecord>,
    pub projector: GroupProjector,
    pub classifier: AttributeClassifier,
}

impl Inputs {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let model = ToyLm::load(&cfg.model)?;
        let eval_model = ToyLm::load(&cfg.eval_model)?;
        let vocab = Vocabulary::load(&cfg.vocab)?;
        let prompts: Vec<PromptRecord> = read_jsonl(&cfg.prompts)?;
        Self::new(cfg, model, eval_model, vocab, prompts)
    }

    pub fn new(
        cfg: &ExperimentConfig,
        model: ToyLm,
        eval_model: ToyLm,
        vocab: Vocabulary,
        prompts: Vec<PromptRecord>,
    ) -> Result<Self> {
        for m in [&model, &eval_model] {
            if m.vocab_size() != vocab.len() {
                return Err(LabError::Config(format!(
                    "model vocabulary size {} differs from vocabulary ({})",
                    m.vocab_size(),
                    vocab.len()
                )));
            }
        }
        for g in &cfg.groups {
            if vocab.seed_set(g).is_none() {
                return Err(LabError::Config(format!("vocabulary has no seed set `{g}`")));
            }
        }
        let groups: Vec<&str> = cfg.groups.iter().map(String::as_str).collect();
        validate_pairs(&prompts, &groups)?;
        if let Some(bad) = prompts
            .iter()
            .flat_map(|p| &p.tokens)
            .find(|&&t| t >= vocab.len())
        {
            return Err(LabError::Config(format!("prompt token {bad} out of range")));
        }
        let projector = GroupProjector::from_seeds(&vocab, model.embeddings(), None)?;
        let classifier = AttributeClassifier::for_task(&vocab, model.embeddings(), cfg.task)?;
        Ok(Self {
            model,
            eval_model,
            vocab,
            prompts,
            projector,
            classifier,
        })
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| LabError::Config(format!("{THREADS_ENV} must be a positive integer")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| LabError::Config(format!("cannot build worker pool: {e}")))
}

/// Generations and failures of a sweep, in work-unit order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub lines: Vec<GenerationLine>,
    pub failures: Vec<FailedCell>,
}

/// Generates every (method, prompt, continuation) unit and scores perplexity.
pub fn generate_all(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Sweep> {
    let mut decoders = Vec::new();
    for &m in &cfg.methods {
        decoders.push(Decoder::new(
            &inputs.model,
            &inputs.vocab,
            &inputs.projector,
            &inputs.classifier,
            cfg.intervention_for(m)?,
            cfg.sampling,
        )?);
    }
    let units: Vec<(usize, usize, usize)> = (0..decoders.len())
        .flat_map(|m| {
            (0..inputs.prompts.len())
                .flat_map(move |p| (0..cfg.n_continuations).map(move |k| (m, p, k)))
        })
        .collect();
    let run = |&(m, p, k): &(usize, usize, usize)| -> std::result::Result<GenerationLine, FailedCell> {
        let decoder = &decoders[m];
        let prompt = &inputs.prompts[p];
        let method = cfg.methods[m];
        let seed = record_seed(cfg.seed, method, prompt.pair_id, k);
        let fail = |e: LabError| FailedCell {
            pair_id: prompt.pair_id,
            group_prompt: prompt.group.clone(),
            method,
            continuation: k,
            error: e.to_string(),
        };
        let rec: GenerationRecord = decoder
            .generate(&prompt.tokens, Some(&prompt.group), seed)
            .map_err(fail)?;
        let ppl = crate::eval::perplexity(&rec.output, &inputs.eval_model).map_err(fail)?;
        let token_ids = rec.generated();
        Ok(GenerationLine {
            pair_id: prompt.pair_id,
            group_prompt: prompt.group.clone(),
            method,
            continuation: k,
            prompt_ids: rec.prompt.ids().to_vec(),
            text: inputs.vocab.render(&token_ids),
            token_ids,
            ppl: Some(ppl).filter(|p| p.is_finite()),
            terminated_by: rec.terminated_by,
            steps: rec
                .trace
                .iter()
                .map(|s| StepLine {
                    lg: s.lg,
                    la: s.la,
                    wg: s.wg,
                    wa: s.wa,
                    chosen: s.chosen,
                })
                .collect(),
        })
    };
    let results: Vec<_> = thread_pool()?.install(|| units.par_iter().map(run).collect());
    let mut sweep = Sweep {
        lines: Vec::new(),
        failures: Vec::new(),
    };
    for r in results {
        match r {
            Ok(l) => sweep.lines.push(l),
            Err(f) => sweep.failures.push(f),
        }
    }
    Ok(sweep)
}

/// Scores generations, dropping every pair that has a failed cell for the
/// same method so that no pair is half-counted.
pub fn score_lines(
    lines: &[GenerationLine],
    failures: &[FailedCell],
    vocab: &Vocabulary,
    eval_model: &ToyLm,
) -> Result<Vec<ScoredRecord>> {
    let excluded: BTreeSet<(Method, u64)> = failures.iter().map(|f| (f.method, f.pair_id)).collect();
    lines
        .iter()
        .filter(|l| !excluded.contains(&(l.method, l.pair_id)))
        .map(|l| {
            let mut rec = score_record(l.method.name(), l.pair_id, &l.sequence(vocab.bos()), vocab, eval_model)?;
            if l.ppl.is_none() {
                rec.ppl = f64::INFINITY;
            }
            Ok(rec)
        })
        .collect()
}

/// Plug-in mutual information of the sampled generations, per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalInfo {
    pub n: usize,
    /// `I(g(x); a(x))` of the empirical distribution.
    pub mi_gen: f64,
    /// `I(g(x); a(c, x))` of the empirical distribution.
    pub mi_joint: f64,
    /// `H(a(c, x) | a(x))` of the empirical distribution.
    pub h_joint_given_gen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoSummary {
    pub empirical: BTreeMap<String, EmpiricalInfo>,
    /// Exact enumeration of each decoder over the prompt set; absent when the
    /// budget is exceeded or enumeration fails.
    pub exact: BTreeMap<String, Option<ExactSummary>>,
}

fn empirical_info(lines: &[&GenerationLine], vocab: &Vocabulary) -> Result<Option<EmpiricalInfo>> {
    if lines.is_empty() {
        return Ok(None);
    }
    let w = 1.0 / lines.len() as f64;
    let table = Table::from_rows(lines.iter().map(|l| {
        let gen_only = l.sequence(vocab.bos());
        let label = |mode| crate::eval::label_gender(&gen_only, vocab, mode);
        (
            vec![
                sentiment_class(&gen_only, vocab),
                group_code(label(LabelMode::Gen).as_deref(), vocab),
                group_code(label(LabelMode::Joint).as_deref(), vocab),
            ],
            w,
        )
    }))?;
    Ok(Some(EmpiricalInfo {
        n: lines.len(),
        mi_gen: table.mutual_info(&[0], &[1]),
        mi_joint: table.mutual_info(&[0], &[2]),
        h_joint_given_gen: table.cond_entropy(&[2], &[1]),
    }))
}

pub fn info_summary(cfg: &ExperimentConfig, inputs: &Inputs, lines: &[GenerationLine]) -> Result<InfoSummary> {
    let mut empirical = BTreeMap::new();
    let mut exact = BTreeMap::new();
    let prompts = prompt_pairs(&inputs.prompts);
    for &m in &cfg.methods {
        let mine: Vec<&GenerationLine> = lines.iter().filter(|l| l.method == m).collect();
        if let Some(info) = empirical_info(&mine, &inputs.vocab)? {
            empirical.insert(m.name().to_string(), info);
        }
        let icfg = cfg.intervention_for(m)?;
        let budget = (inputs.vocab.len() as f64).powi(icfg.max_len as i32);
        let summary = if budget <= ENUMERATION_BUDGET {
            exact_summary(
                &inputs.model,
                &inputs.eval_model,
                &inputs.vocab,
                &inputs.projector,
                &inputs.classifier,
                icfg,
                cfg.sampling,
                &prompts,
                cfg.sanitize_threshold,
            )
            .ok()
        } else {
            None
        };
        exact.insert(m.name().to_string(), summary);
    }
    Ok(InfoSummary { empirical, exact })
}

/// Paths written by [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub generations: PathBuf,
    pub failures: PathBuf,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
    pub infoth: PathBuf,
    pub n_failed: usize,
}

pub fn bias_report(cfg: &ExperimentConfig, records: &[ScoredRecord]) -> BiasReport {
    let methods: Vec<String> = cfg.methods.iter().map(|m| m.name().to_string()).collect();
    BiasReport::build(
        &methods,
        records,
        [cfg.groups[0].as_str(), cfg.groups[1].as_str()],
        cfg.sanitize_threshold,
    )
}

/// Writes the bias report as JSON and CSV into `dir`.
pub fn write_report(dir: &Path, report: &BiasReport) -> Result<(PathBuf, PathBuf)> {
    let json = dir.join(REPORT_JSON);
    let csv = dir.join(REPORT_CSV);
    write(&json, &(report.to_json()? + "\n"))?;
    write(&csv, &report.to_csv()?)?;
    Ok((json, csv))
}

/// Full pipeline: generate, score, label, sanitize, aggregate, write.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outputs> {
    cfg.validate()?;
    let inputs = Inputs::load(cfg)?;
    run_with_inputs(cfg, &inputs)
}

pub fn run_with_inputs(cfg: &ExperimentConfig, inputs: &Inputs) -> Result<Outputs> {
    let sweep = generate_all(cfg, inputs)?;
    let records = score_lines(&sweep.lines, &sweep.failures, &inputs.vocab, &inputs.eval_model)?;
    let report = bias_report(cfg, &records);
    let info = info_summary(cfg, inputs, &sweep.lines)?;

    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let generations = dir.join(GENERATIONS_FILE);
    let failures = dir.join(FAILURES_FILE);
    let infoth = dir.join(INFOTH_FILE);
    write(&generations, &to_jsonl(&sweep.lines)?)?;
    write(&failures, &to_jsonl(&sweep.failures)?)?;
    let (report_json, report_csv) = write_report(dir, &report)?;
    write(&infoth, &(serde_json::to_string_pretty(&info)? + "\n"))?;
    Ok(Outputs {
        generations,
        failures,
        report_json,
        report_csv,
        infoth,
        n_failed: sweep.failures.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_seed_depends_on_every_coordinate() {
        let base = record_seed(1, Method::None, 2, 3);
        assert_eq!(base, record_seed(1, Method::None, 2, 3));
        assert_ne!(base, record_seed(2, Method::None, 2, 3));
        assert_ne!(base, record_seed(1, Method::LidaoMin, 2, 3));
        assert_ne!(base, record_seed(1, Method::None, 3, 3));
        assert_ne!(base, record_seed(1, Method::None, 2, 4));
    }
}
