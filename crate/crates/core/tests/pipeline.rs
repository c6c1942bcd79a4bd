use std::fs;
use std::path::Path;

use lidao_lab::controller::Method;
use lidao_lab::eval::{label_gender, LabelMode};
use lidao_lab::expcli::analysis::{group_code, sentiment_class};
use lidao_lab::expcli::experiment::{
    read_jsonl, run_experiment, score_lines, FailedCell, GenerationLine, Inputs, GENERATIONS_FILE,
};
use lidao_lab::expcli::verify::{lemma_sweep, verify, VerifyOptions};
use lidao_lab::expcli::world::{make_toy_world, PromptRecord, MIN_EMBED_DIM, MIN_HIDDEN, MIN_VOCAB};
use lidao_lab::expcli::{default_toy_world, ExperimentConfig, ToyWorld};
use lidao_lab::infoth::{enumerate, lemma_residual, ModelSource, Table};
use lidao_lab::seqcore::{TokenSequence, Vocabulary};
use lidao_lab::{LabError, Result};

fn base_mi(world: &ToyWorld, max_len: usize) -> f64 {
    let source = ModelSource {
        model: &world.model,
        prompt: vec![world.vocab.bos()],
        eos: Some(world.vocab.eos()),
        max_len,
    };
    let joint = enumerate(&source).unwrap();
    let vocab = &world.vocab;
    let rows = joint.iter().map(|(x, p)| {
        let mut s = TokenSequence::prompt(&[vocab.bos()], vocab.bos());
        x.iter().for_each(|&t| s.push_generated(t));
        let a = group_code(label_gender(&s, vocab, LabelMode::Gen).as_deref(), vocab);
        (vec![sentiment_class(&s, vocab), a], p)
    });
    Table::from_rows(rows).unwrap().mutual_info(&[0], &[1])
}

/// Horizon holding at most one predicate: clause count cannot confound the
/// aggregate labels there.
const SINGLE_PREDICATE_LEN: usize = 3;

#[test]
fn bias_strength_controls_generation_bias() {
    for seed in 0..10 {
        for max_len in [SINGLE_PREDICATE_LEN, 4] {
            let mi: Vec<f64> = [0.0, 0.5, 1.0]
                .iter()
                .map(|&s| base_mi(&default_toy_world(seed, s).unwrap(), max_len))
                .collect();
            if max_len == SINGLE_PREDICATE_LEN {
                assert!(mi[0] < 1e-6, "seed {seed}: unbiased world leaks {}", mi[0]);
            }
            assert!(mi[0] < mi[1] && mi[1] < mi[2], "seed {seed}, len {max_len}: {mi:?}");
        }
    }
}

#[test]
fn toy_world_validates_sizes() {
    assert!(matches!(make_toy_world(0, 1.0, MIN_VOCAB - 1, MIN_EMBED_DIM, MIN_HIDDEN), Err(LabError::Budget(_))));
    assert!(matches!(make_toy_world(0, 1.0, MIN_VOCAB, MIN_EMBED_DIM - 1, MIN_HIDDEN), Err(LabError::Budget(_))));
    assert!(matches!(make_toy_world(0, 1.5, MIN_VOCAB, MIN_EMBED_DIM, MIN_HIDDEN), Err(LabError::Config(_))));
    let big = make_toy_world(0, 1.0, 20, 8, 6).unwrap();
    assert_eq!(big.vocab.len(), 20);
    assert_eq!(big.model.vocab_size(), 20);
}

#[test]
fn vocabulary_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let world = default_toy_world(5, 0.7).unwrap();
    let path = dir.path().join("vocab.json");
    world.vocab.save(&path).unwrap();
    assert_eq!(Vocabulary::load(&path).unwrap(), world.vocab);
}

fn write_inputs(dir: &Path, world: &ToyWorld, prompts: &[PromptRecord], extra: &str) -> ExperimentConfig {
    world.vocab.save(dir.join("vocab.json")).unwrap();
    world.model.save(dir.join("model.json")).unwrap();
    world.eval_model.save(dir.join("eval_model.json")).unwrap();
    let lines: String = prompts.iter().map(|p| serde_json::to_string(p).unwrap() + "\n").collect();
    fs::write(dir.join("prompts.jsonl"), lines).unwrap();
    let text = format!(
        "model = \"model.json\"\nvocab = \"vocab.json\"\nprompts = \"prompts.jsonl\"\neval_model = \"eval_model.json\"\n{extra}"
    );
    fs::write(dir.join("config.toml"), text).unwrap();
    ExperimentConfig::load(dir.join("config.toml")).unwrap()
}

#[test]
fn experiment_is_deterministic() {
    let world = default_toy_world(1, 1.0).unwrap();
    let extra = "methods = [\"none\", \"none\", \"lidao_min\"]\nseed = 4\n[intervention]\nlr = 2.0\nmax_len = 4\n";
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outs: Vec<_> = dirs
        .iter()
        .map(|d| run_experiment(&write_inputs(d.path(), &world, &world.prompts, extra)).unwrap())
        .collect();
    let read = |p: &Path| fs::read(p).unwrap();
    assert_eq!(read(&outs[0].generations), read(&outs[1].generations));
    assert_eq!(read(&outs[0].report_csv), read(&outs[1].report_csv));
    assert_eq!(read(&outs[0].report_json), read(&outs[1].report_json));
    assert_eq!(read(&outs[0].infoth), read(&outs[1].infoth));

    // rerunning in place overwrites with identical bytes
    let cfg = ExperimentConfig::load(dirs[0].path().join("config.toml")).unwrap();
    let before = read(&outs[0].generations);
    run_experiment(&cfg).unwrap();
    assert_eq!(read(&outs[0].generations), before);

    // the duplicated method yields identical records
    let lines: Vec<GenerationLine> = read_jsonl(&outs[0].generations).unwrap();
    let none: Vec<_> = lines.iter().filter(|l| l.method == Method::None).collect();
    let half = none.len() / 2;
    for (a, b) in none[..half].iter().zip(&none[half..]) {
        assert_eq!(a, b);
    }
}

#[test]
fn experiment_line_counts() {
    let world = default_toy_world(1, 1.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_inputs(
        dir.path(),
        &world,
        &world.prompts[..2],
        "methods = [\"lidao_min\"]\nn_continuations = 1\n",
    );
    let out = run_experiment(&cfg).unwrap();
    let text = fs::read_to_string(&out.generations).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(out.n_failed, 0);
    assert!(cfg.out_dir.join(GENERATIONS_FILE).exists());
    for p in [&out.failures, &out.report_csv, &out.report_json, &out.infoth] {
        assert!(p.exists(), "{}", p.display());
    }
}

#[test]
fn failed_cells_exclude_the_whole_pair() {
    let world = default_toy_world(1, 1.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_inputs(dir.path(), &world, &world.prompts, "methods = [\"none\"]\nn_continuations = 2\n");
    let out = run_experiment(&cfg).unwrap();
    let lines: Vec<GenerationLine> = read_jsonl(&out.generations).unwrap();
    let inputs = Inputs::load(&cfg).unwrap();
    let victim = lines[0].pair_id;
    let failure = FailedCell {
        pair_id: victim,
        group_prompt: "male".into(),
        method: Method::None,
        continuation: 0,
        error: "synthetic".into(),
    };
    let all = score_lines(&lines, &[], &inputs.vocab, &inputs.eval_model).unwrap();
    let kept = score_lines(&lines, &[failure], &inputs.vocab, &inputs.eval_model).unwrap();
    let from_pair = lines.iter().filter(|l| l.pair_id == victim).count();
    assert_eq!(from_pair, 4);
    assert_eq!(kept.len(), all.len() - from_pair);
    assert!(kept.iter().all(|r| r.pair_id != victim));
}

#[test]
fn bad_inputs_are_config_errors() {
    let world = default_toy_world(1, 1.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = write_inputs(dir.path(), &world, &world.prompts, "methods = [\"none\"]\n");
    cfg.prompts = dir.path().join("missing.jsonl");
    assert!(matches!(run_experiment(&cfg), Err(LabError::Io { .. })));

    let unpaired: Vec<PromptRecord> = world.prompts.iter().filter(|p| p.group == "male").cloned().collect();
    let cfg = write_inputs(dir.path(), &world, &unpaired, "methods = [\"none\"]\n");
    assert!(matches!(Inputs::load(&cfg), Err(LabError::Config(_))));
}

fn corrupted_lemma(table: &Table, g: usize, a: usize, xs: &[usize], t: usize) -> Result<f64> {
    Ok(lemma_residual(table, g, a, xs, t)? + if t == 2 { 1e-6 } else { 0.0 })
}

#[test]
fn corrupted_lemma_fails_verification() {
    let opts = VerifyOptions {
        lemma: corrupted_lemma,
        ..VerifyOptions::default()
    };
    assert!(!lemma_sweep(&opts).pass);
    assert!(verify(&opts).iter().any(|r| !r.pass));
    assert!(lemma_sweep(&VerifyOptions::default()).pass);
}
