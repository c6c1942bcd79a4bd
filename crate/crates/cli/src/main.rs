use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lidao_lab::controller::{InterventionConfig, Method};
use lidao_lab::eval::LabelMode;
use lidao_lab::expcli::experiment::{
    bias_report, generate_all, read_jsonl, run_with_inputs, score_lines, to_jsonl, write_report, FailedCell,
    GenerationLine, Inputs, FAILURES_FILE, GENERATIONS_FILE,
};
use lidao_lab::expcli::verify::{all_pass, report_json, verify, VerifyOptions};
use lidao_lab::expcli::world::{make_toy_world, MIN_EMBED_DIM, MIN_HIDDEN, MIN_VOCAB};
use lidao_lab::expcli::ExperimentConfig;
use lidao_lab::LabError;

#[derive(Parser)]
#[command(name = "lidao-lab", version, about = "Bias-controlled decoding on toy language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the identity, gradient and closed-form checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic world and a matching config.
    MakeToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "toy")]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        bias_strength: f64,
        #[arg(long, default_value_t = MIN_VOCAB)]
        vocab_size: usize,
        #[arg(long, default_value_t = MIN_EMBED_DIM)]
        embed_dim: usize,
        #[arg(long, default_value_t = MIN_HIDDEN)]
        hidden: usize,
    },
    /// Sample generations for every method, prompt and continuation.
    Generate(RunArgs),
    /// Score existing generations and write the bias report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the generations; defaults to the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep only rows for this labeling mode.
        #[arg(long, value_parser = ["gen", "joint"])]
        mode: Option<String>,
    },
    /// Generate, evaluate and summarize in one pass.
    Experiment(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
}

enum Failure {
    Check,
    Lab(LabError),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Failure::Lab(e)
    }
}

fn load_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>, methods: Option<Vec<String>>) -> Result<ExperimentConfig, LabError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    if let Some(ms) = methods {
        cfg.methods = ms.iter().map(|m| m.trim().parse::<Method>()).collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<(), LabError> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), LabError> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

fn run_verify(seed: u64, out: Option<PathBuf>) -> Result<(), Failure> {
    let results = verify(&VerifyOptions {
        seed,
        ..VerifyOptions::default()
    });
    for r in &results {
        println!(
            "{:<26} {:>4} instances  max residual {:.3e}  {}",
            r.check_name,
            r.instances,
            r.max_residual,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(path) = out {
        write(&path, &report_json(&results)?)?;
    }
    if all_pass(&results) {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn run_make_toy(seed: u64, out: &Path, s: f64, v: usize, d: usize, h: usize) -> Result<(), Failure> {
    let world = make_toy_world(seed, s, v, d, h)?;
    create_dir(out)?;
    world.vocab.save(out.join("vocab.json"))?;
    world.model.save(out.join("model.json"))?;
    world.eval_model.save(out.join("eval_model.json"))?;
    write(&out.join("prompts.jsonl"), &to_jsonl(&world.prompts)?)?;
    let cfg = ExperimentConfig {
        model: "model.json".into(),
        vocab: "vocab.json".into(),
        prompts: "prompts.jsonl".into(),
        eval_model: "eval_model.json".into(),
        out_dir: "out".into(),
        methods: Method::ALL.to_vec(),
        n_continuations: 10,
        sanitize_threshold: lidao_lab::eval::DEFAULT_SANITIZE_THRESHOLD,
        seed,
        task: lidao_lab::seqcore::Task::Sentiment,
        groups: ["male".into(), "female".into()],
        sampling: Default::default(),
        intervention: InterventionConfig {
            lr: 2.0,
            max_len: 4,
            ..InterventionConfig::default()
        },
        method: Default::default(),
    };
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    println!("wrote toy world to {}", out.display());
    Ok(())
}

fn run_generate(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config, args.seed, args.out, args.methods)?;
    let inputs = Inputs::load(&cfg)?;
    let sweep = generate_all(&cfg, &inputs)?;
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join(GENERATIONS_FILE), &to_jsonl(&sweep.lines)?)?;
    write(&cfg.out_dir.join(FAILURES_FILE), &to_jsonl(&sweep.failures)?)?;
    println!(
        "{} generations, {} failed cells in {}",
        sweep.lines.len(),
        sweep.failures.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn run_evaluate(config: &Path, out: Option<PathBuf>, mode: Option<String>) -> Result<(), Failure> {
    let mut cfg = load_config(config, None, out, None)?;
    let inputs = Inputs::load(&cfg)?;
    let lines: Vec<GenerationLine> = read_jsonl(&cfg.out_dir.join(GENERATIONS_FILE))?;
    cfg.methods.retain(|m| lines.iter().any(|l| l.method == *m));
    if cfg.methods.is_empty() {
        return Err(LabError::Config("no generations for any configured method".into()).into());
    }
    let failures_path = cfg.out_dir.join(FAILURES_FILE);
    let failures: Vec<FailedCell> = if failures_path.exists() {
        read_jsonl(&failures_path)?
    } else {
        Vec::new()
    };
    let records = score_lines(&lines, &failures, &inputs.vocab, &inputs.eval_model)?;
    let mut report = bias_report(&cfg, &records);
    if let Some(m) = mode {
        let m: LabelMode = m.parse()?;
        report.rows.retain(|r| r.mode == m);
    }
    let (json, csv) = write_report(&cfg.out_dir, &report)?;
    print!("{}", report.to_csv()?);
    eprintln!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn run_experiment(args: RunArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config, args.seed, args.out, args.methods)?;
    let inputs = Inputs::load(&cfg)?;
    let outputs = run_with_inputs(&cfg, &inputs)?;
    println!("{}", outputs.report_csv.display());
    println!("{}", outputs.generations.display());
    println!("{}", outputs.infoth.display());
    if outputs.n_failed > 0 {
        eprintln!("{} cells failed; see {}", outputs.n_failed, outputs.failures.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { seed, out } => run_verify(seed, out),
        Command::MakeToy {
            seed,
            out,
            bias_strength,
            vocab_size,
            embed_dim,
            hidden,
        } => run_make_toy(seed, &out, bias_strength, vocab_size, embed_dim, hidden),
        Command::Generate(args) => run_generate(args),
        Command::Evaluate { config, out, mode } => run_evaluate(&config, out, mode),
        Command::Experiment(args) => run_experiment(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Lab(e)) => {
            eprintln!("error: {e}");
            match e {
                LabError::Config(_) | LabError::Io { .. } | LabError::Budget(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
