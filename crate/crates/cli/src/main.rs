//! Command-line front end: leaderboard construction, knowledge-base
//! building, task classification, routing, and evaluation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data-integrity error,
//! 4 transport error, 1 anything else.

mod config;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use opsroute::dataset::{load_dataset, Dataset, LoadConfig, Split};
use opsroute::evaluation::{
    heatmap_data, metrics_csv, radar_data, run_baseline, score_classification, score_decisions,
    Averaging, BaselineSpec, EvalReport,
};
use opsroute::leaderboard::{
    build_matrix, load_answer_logs, save_answer_logs, AnswerLogs, TaskExpertMap,
};
use opsroute::llm_client::{run_with_checkpoint, Checkpoint, Stage, WorkItem};
use opsroute::prompting::{parse_classifier, parse_expert, TaskPrediction, TemplateSet};
use opsroute::retrieval::{build_kb, save_kb};
use opsroute::router::{load_decisions, save_decisions};
use opsroute::{Error, ErrorKind, ExpertRef, Result};

use config::{EmbedderConfig, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "opsroute",
    about = "Two-stage expert routing for multiple-choice AIOps QA",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every expert over the benchmark and derive the task-expert map.
    BuildLeaderboard(BuildLeaderboardArgs),
    /// Embed one split of the dataset into a knowledge-base file.
    BuildKb(BuildKbArgs),
    /// Run only the task-classification stage over a dataset.
    Classify(ClassifyArgs),
    /// Run the full classify-route-answer pipeline over a dataset.
    Route(RouteArgs),
    /// Score decision logs and baselines into report files.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset path: a .jsonl file, a single delimiter-separated file,
    /// or a directory of per-task CSV files.
    #[arg(long)]
    dataset: PathBuf,
    /// Field delimiter for delimiter-separated files.
    #[arg(long, default_value = ",")]
    delimiter: char,
    /// Task label override for single-file loads (defaults to the file
    /// stem).
    #[arg(long)]
    task: Option<String>,
    /// Split assigned to delimiter-separated rows: eval (alias dev) or
    /// test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Keep only the named split after loading.
    #[arg(long)]
    only_split: Option<String>,
}

impl DatasetArgs {
    fn load(&self) -> Result<Dataset> {
        let mut buf = [0u8; 4];
        let delim = self.delimiter.encode_utf8(&mut buf).as_bytes();
        if delim.len() != 1 {
            return Err(Error::Config(format!(
                "delimiter `{}` is not a single byte",
                self.delimiter
            )));
        }
        let cfg = LoadConfig {
            delimiter: delim[0],
            task: self.task.clone(),
            split: parse_split(&self.split)?,
        };
        let d = load_dataset(&self.dataset, &cfg)?;
        match &self.only_split {
            None => Ok(d),
            Some(s) => {
                let split = parse_split(s)?;
                let name = d.name.clone();
                let kept: Vec<_> = d.split(split).cloned().collect();
                if kept.is_empty() {
                    return Err(Error::Config(format!("split `{s}` of {name} is empty")));
                }
                Dataset::new(name, kept)
            }
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s.to_ascii_lowercase().as_str() {
        "eval" | "dev" => Ok(Split::Eval),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "unknown split `{other}` (expected eval, dev, or test)"
        ))),
    }
}

#[derive(Args)]
struct BuildLeaderboardArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// JSON array of expert endpoints to benchmark.
    #[arg(long)]
    experts: PathBuf,
    /// Output path for the capability matrix.
    #[arg(long)]
    out_matrix: PathBuf,
    /// Output path for the derived task-expert map.
    #[arg(long)]
    out_map: PathBuf,
    /// Optional output path for the raw per-expert answer logs.
    #[arg(long)]
    out_answers: Option<PathBuf>,
    /// Directory for per-expert completion checkpoints; re-runs skip
    /// completed questions.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Waive the candidate-pool bound (2 <= experts <= tasks), e.g. to
    /// benchmark a single expert.
    #[arg(long)]
    allow_single_expert: bool,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct BuildKbArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Restrict the knowledge base to one split (eval/dev/test); all
    /// questions otherwise.
    #[arg(long)]
    kb_split: Option<String>,
    /// Embedder config file (JSON).
    #[arg(long)]
    embedder: PathBuf,
    /// Output knowledge-base file.
    #[arg(long)]
    out: PathBuf,
    /// L2-normalize stored vectors.
    #[arg(long)]
    normalize: bool,
    /// Embedding checkpoint file; re-runs skip embedded questions.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Pipeline config file (JSON).
    #[arg(long)]
    pipeline: PathBuf,
    /// Output predictions file (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Completion checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Also write a classification report (CSV) scored against gold
    /// task labels.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Macro-average the report metrics instead of support-weighting.
    #[arg(long = "macro")]
    macro_avg: bool,
}

#[derive(Args)]
struct RouteArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Pipeline config file (JSON).
    #[arg(long)]
    pipeline: PathBuf,
    /// Output decision log (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Completion checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// TEST ONLY: classify with gold task labels. Decisions are marked
    /// and `evaluate` refuses them without --allow-oracle.
    #[arg(long)]
    oracle_classifier: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Decision log to score (JSONL from `route`).
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// Subject label for the decision-log report.
    #[arg(long, default_value = "pipeline")]
    subject: String,
    /// Per-expert answer logs (JSONL), required by --baseline.
    #[arg(long)]
    answer_logs: Option<PathBuf>,
    /// Baseline to score: `single-expert=NAME`, `random-coe=SEED`, or
    /// `oracle-router`. Repeatable.
    #[arg(long)]
    baseline: Vec<String>,
    /// Task-expert map, required by the oracle-router baseline.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Output directory for report files.
    #[arg(long)]
    out_dir: PathBuf,
    /// Macro-average metrics instead of support-weighting.
    #[arg(long = "macro")]
    macro_avg: bool,
    /// Accept decision logs produced with --oracle-classifier.
    #[arg(long)]
    allow_oracle: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Integrity => 3,
                ErrorKind::Transport => 4,
                ErrorKind::Other => 1,
            })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildLeaderboard(args) => cmd_build_leaderboard(args),
        Command::BuildKb(args) => cmd_build_kb(args),
        Command::Classify(args) => cmd_classify(args),
        Command::Route(args) => cmd_route(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

/// Opens the given checkpoint, or a throwaway one when no path was
/// requested. The temp dir must outlive the checkpoint, so it rides
/// along in the return value.
fn open_checkpoint(path: Option<&Path>) -> Result<(Checkpoint, Option<tempfile::TempDir>)> {
    match path {
        Some(p) => Ok((Checkpoint::open(p)?, None)),
        None => {
            let dir = tempfile::TempDir::new()?;
            let ckpt = Checkpoint::open(&dir.path().join("run.ckpt"))?;
            Ok((ckpt, Some(dir)))
        }
    }
}

fn cmd_build_leaderboard(args: BuildLeaderboardArgs) -> Result<()> {
    let d = args.dataset.load()?;
    let expert_cfgs = config::load_expert_set(&args.experts)?;
    let templates = match &args.templates {
        Some(dir) => TemplateSet::from_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    if let Some(dir) = &args.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let items: Vec<WorkItem> = d
        .questions
        .iter()
        .map(|q| {
            Ok(WorkItem {
                question_id: q.id.clone(),
                prompt: templates.render_expert_prompt(q)?.text,
            })
        })
        .collect::<Result<_>>()?;

    let mut logs: AnswerLogs = indexmap::IndexMap::new();
    for cfg in &expert_cfgs {
        let model = cfg.build()?;
        let ckpt_path = args
            .checkpoint_dir
            .as_ref()
            .map(|dir| dir.join(format!("{}.ckpt", cfg.name)));
        let (ckpt, _guard) = open_checkpoint(ckpt_path.as_deref())?;
        let records = run_with_checkpoint(
            model.as_ref(),
            &items,
            Stage::Answer,
            &ckpt,
            args.parallelism,
            |raw| serde_json::json!({ "choice": parse_expert(raw).choice }),
        )?;
        let mut answers = HashMap::new();
        for rec in &records {
            if let Some(letter) = parse_expert(&rec.raw).choice.letter() {
                answers.insert(rec.question_id.clone(), letter);
            }
        }
        logs.insert(ExpertRef::new(cfg.name.clone()), answers);
    }

    let matrix = build_matrix(&logs, &d)?;
    matrix.save(&args.out_matrix)?;
    let map = TaskExpertMap::from_matrix(&matrix, args.allow_single_expert)?;
    map.save(&args.out_map)?;
    if let Some(path) = &args.out_answers {
        save_answer_logs(&logs, path)?;
    }

    for (task, expert) in &map.entries {
        println!("{task} -> {expert}");
    }
    println!("UNKNOWN -> {}", map.unknown_expert);
    Ok(())
}

fn cmd_build_kb(args: BuildKbArgs) -> Result<()> {
    let d = args.dataset.load()?;
    let split = args.kb_split.as_deref().map(parse_split).transpose()?;
    let provider = EmbedderConfig::load(&args.embedder)?.build()?;
    let kb = build_kb(
        &d,
        split,
        provider.as_ref(),
        args.normalize,
        args.checkpoint.as_deref(),
    )?;
    save_kb(&kb, &args.out)?;
    println!(
        "wrote {} records (dim {}) to {}",
        kb.records.len(),
        kb.dim,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ClassificationLine {
    question_id: String,
    predicted: TaskPrediction,
    raw: String,
}

fn cmd_classify(args: ClassifyArgs) -> Result<()> {
    let d = args.dataset.load()?;
    let cfg = PipelineConfig::load(&args.pipeline)?;
    let pipeline = cfg.build(d.tasks.clone(), false, false)?;
    let (ckpt, _guard) = open_checkpoint(args.checkpoint.as_deref())?;

    let records = opsroute::llm_client::run_parallel(&d.questions, args.parallelism, |q| {
        ckpt.complete_or_skip(&q.id, Stage::Classify, || {
            let (output, _hits) = pipeline.classify(q)?;
            Ok((
                output.raw,
                serde_json::json!({ "predicted": output.predicted }),
            ))
        })
    })?;

    let mut out = std::fs::File::create(&args.out)?;
    let mut preds: HashMap<String, TaskPrediction> = HashMap::new();
    for rec in &records {
        let predicted = parse_classifier(&rec.raw, &d.tasks).predicted;
        let line = ClassificationLine {
            question_id: rec.question_id.clone(),
            predicted: predicted.clone(),
            raw: rec.raw.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
        preds.insert(rec.question_id.clone(), predicted);
    }

    if let Some(report_path) = &args.report {
        let averaging = if args.macro_avg { Averaging::Macro } else { Averaging::Weighted };
        let report = score_classification(&preds, &d, "classifier", averaging)?;
        std::fs::write(report_path, metrics_csv(std::slice::from_ref(&report)))?;
        println!("classification accuracy: {:.4}", report.accuracy);
    }
    println!("classified {} questions into {}", records.len(), args.out.display());
    Ok(())
}

fn cmd_route(args: RouteArgs) -> Result<()> {
    let d = args.dataset.load()?;
    let cfg = PipelineConfig::load(&args.pipeline)?;
    let pipeline = cfg.build(d.tasks.clone(), args.oracle_classifier, true)?;
    let (ckpt, _guard) = open_checkpoint(args.checkpoint.as_deref())?;
    let decisions = pipeline.run(&d, &ckpt, args.parallelism)?;
    save_decisions(&decisions, &args.out)?;
    let failures = decisions.iter().filter(|dec| dec.error.is_some()).count();
    println!(
        "routed {} questions into {} ({} with stage errors)",
        decisions.len(),
        args.out.display(),
        failures
    );
    Ok(())
}

fn parse_baseline(s: &str) -> Result<BaselineSpec> {
    let (kind, value) = match s.split_once('=') {
        Some((k, v)) => (k, Some(v)),
        None => (s, None),
    };
    match (kind, value) {
        ("single-expert", Some(name)) => Ok(BaselineSpec::SingleExpert {
            expert: name.to_string(),
        }),
        ("random-coe", Some(seed)) => Ok(BaselineSpec::RandomCoe {
            seed: seed
                .parse()
                .map_err(|_| Error::Config(format!("random-coe seed `{seed}` is not an integer")))?,
        }),
        ("oracle-router", None) => Ok(BaselineSpec::OracleRouter),
        _ => Err(Error::Config(format!(
            "unknown baseline `{s}` (expected single-expert=NAME, random-coe=SEED, or oracle-router)"
        ))),
    }
}

fn subject_file_stem(subject: &str) -> String {
    subject
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if args.decisions.is_none() && args.baseline.is_empty() {
        return Err(Error::Config(
            "nothing to evaluate: pass --decisions and/or --baseline".into(),
        ));
    }
    let d = args.dataset.load()?;
    let averaging = if args.macro_avg { Averaging::Macro } else { Averaging::Weighted };
    std::fs::create_dir_all(&args.out_dir)?;

    let mut reports: Vec<EvalReport> = Vec::new();
    if let Some(path) = &args.decisions {
        let decisions = load_decisions(path)?;
        if decisions.iter().any(|dec| dec.oracle_classifier) && !args.allow_oracle {
            return Err(Error::Config(format!(
                "{} contains oracle-classifier decisions; pass --allow-oracle to score a test run",
                path.display()
            )));
        }
        reports.push(score_decisions(&decisions, &d, &args.subject, averaging)?);
    }

    if !args.baseline.is_empty() {
        let logs_path = args.answer_logs.as_ref().ok_or_else(|| {
            Error::Config("baselines need --answer-logs".into())
        })?;
        let logs = load_answer_logs(logs_path)?;
        let map = args.map.as_deref().map(TaskExpertMap::load).transpose()?;
        for spec in &args.baseline {
            let spec = parse_baseline(spec)?;
            reports.push(run_baseline(&spec, &logs, &d, map.as_ref(), averaging)?);
        }
    }

    std::fs::write(args.out_dir.join("metrics.csv"), metrics_csv(&reports))?;
    for report in &reports {
        let name = format!("heatmap-{}.json", subject_file_stem(&report.subject));
        std::fs::write(
            args.out_dir.join(name),
            serde_json::to_string_pretty(&heatmap_data(report))?,
        )?;
    }
    std::fs::write(
        args.out_dir.join("radar.json"),
        serde_json::to_string_pretty(&radar_data(&reports))?,
    )?;

    for report in &reports {
        println!(
            "{}: n={} accuracy={:.4} precision={:.4} recall={:.4} f1={:.4}",
            report.subject, report.n, report.accuracy, report.precision, report.recall, report.f1
        );
    }
    Ok(())
}
