use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use knowtrace_core::backtrace::{
    backtrace as backtrace_one, fa_ratio, trace, ExampleKind, PromptMode,
};
use knowtrace_core::bootstrap::{
    run_bootstrap, write_supervision, BootstrapError, LabeledDataset, RoundReport, RoundSetup,
    TrainHook,
};
use knowtrace_core::engine::{read_trajectories, write_trajectory};
use knowtrace_core::evalkit::{
    build_corpus, evaluate, evaluate_trajectories, exact_match, load_dataset, DatasetKind, QAItem,
};
use knowtrace_core::lmio::GenerationBackend;
use knowtrace_core::retrieval::{read_corpus, write_corpus};
use knowtrace_core::{Engine, ExplorationOutcome, FinalState, Templates, Trajectory};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{ConfigArgs, RunConfig};
use crate::output::{print_eval, write_eval, write_json};
use crate::{DatasetArgs, PromptModeArg};

const DEFAULT_OUT: &str = "knowtrace-out";

fn load_items(data: &DatasetArgs) -> Result<Vec<QAItem>> {
    let mut items = load_dataset(data.dataset_kind.into(), &data.dataset)
        .with_context(|| format!("cannot load dataset {}", data.dataset.display()))?;
    if let Some(limit) = data.limit {
        items.truncate(limit);
    }
    Ok(items)
}

fn out_dir(flag: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn exit_for(failed: usize) -> ExitCode {
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{failed} question(s) failed");
        ExitCode::FAILURE
    }
}

#[derive(Serialize)]
struct Manifest {
    dataset_kind: DatasetKind,
    source: String,
    items: usize,
    candidate_passages: usize,
    corpus_passages: usize,
    corpus_sha256: String,
    created_unix: u64,
}

pub fn ingest(data: &DatasetArgs, out: &Path) -> Result<ExitCode> {
    let items = load_items(data)?;
    let corpus = build_corpus(&items);
    let mut bytes = Vec::new();
    write_corpus(&corpus, &mut bytes)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let corpus_path = out.join("corpus.jsonl");
    fs::write(&corpus_path, &bytes)
        .with_context(|| format!("cannot write {}", corpus_path.display()))?;
    let manifest = Manifest {
        dataset_kind: data.dataset_kind.into(),
        source: data.dataset.display().to_string(),
        items: items.len(),
        candidate_passages: items.iter().map(|i| i.passages.len()).sum(),
        corpus_passages: corpus.len(),
        corpus_sha256: hex::encode(Sha256::digest(&bytes)),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "{} items, {} passages in {}",
        manifest.items,
        manifest.corpus_passages,
        corpus_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

struct Stack {
    backend: Box<dyn GenerationBackend>,
    retriever: Box<dyn knowtrace_core::Retriever>,
    templates: Templates,
}

impl Stack {
    fn new(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            backend: config.build_backend()?,
            retriever: config.build_retriever()?,
            templates: config.build_templates()?,
        })
    }

    fn engine<'a>(&'a self, config: &'a RunConfig) -> Result<Engine<'a>> {
        Ok(Engine::new(
            self.backend.as_ref(),
            self.retriever.as_ref(),
            &self.templates,
            &config.engine,
        )?)
    }
}

pub fn infer(
    cfg: &ConfigArgs,
    question: &str,
    id: Option<&str>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let config = RunConfig::resolve(cfg)?;
    let stack = Stack::new(&config)?;
    let trajectory = stack.engine(&config)?.run_question(id, question);
    let dir = out_dir(out, &config).join("trajectories");
    let path = write_trajectory(&dir, &trajectory)
        .with_context(|| format!("cannot write trajectory into {}", dir.display()))?;
    tracing::info!(path = %path.display(), "trajectory written");
    match &trajectory.final_state {
        FinalState::Failed { step, message, .. } => {
            eprintln!("failed at {step}: {message}");
            Ok(ExitCode::FAILURE)
        }
        state => {
            if matches!(state, FinalState::Exhausted { .. }) {
                tracing::warn!("iteration budget exhausted");
            }
            println!("{}", trajectory.prediction());
            Ok(ExitCode::SUCCESS)
        }
    }
}

pub fn run(
    cfg: &ConfigArgs,
    data: &DatasetArgs,
    out: Option<PathBuf>,
    parallel: usize,
) -> Result<ExitCode> {
    let config = RunConfig::resolve(cfg)?;
    let items = load_items(data)?;
    let stack = Stack::new(&config)?;
    let questions: Vec<(Option<String>, String)> = items
        .iter()
        .map(|i| (Some(i.id.clone()), i.question.clone()))
        .collect();
    let trajectories = stack.engine(&config)?.run_batch(&questions, parallel);
    let out = out_dir(out, &config);
    let dir = out.join("trajectories");
    for t in &trajectories {
        write_trajectory(&dir, t)
            .with_context(|| format!("cannot write into {}", dir.display()))?;
    }
    let summary = evaluate_trajectories(&trajectories, &items);
    write_eval(&out, &summary)?;
    print_eval(&summary);
    Ok(exit_for(
        trajectories.iter().filter(|t| t.is_failed()).count(),
    ))
}

pub fn eval(trajectories: &Path, data: &DatasetArgs, out: &Path) -> Result<ExitCode> {
    let items = load_items(data)?;
    if !trajectories.is_dir() {
        bail!("trajectory directory not found: {}", trajectories.display());
    }
    let summary = evaluate(trajectories, &items)?;
    let missing = summary
        .rows
        .iter()
        .filter(|r| r.flag.as_deref() == Some("missing"))
        .count();
    if missing > 0 {
        tracing::warn!(missing, "questions without a trajectory scored as zero");
    }
    write_eval(out, &summary)?;
    print_eval(&summary);
    Ok(exit_for(
        summary
            .rows
            .iter()
            .filter(|r| r.flag.as_deref() == Some("failed"))
            .count(),
    ))
}

pub struct BacktraceArgs {
    pub trajectories: PathBuf,
    pub golds: Option<PathBuf>,
    pub dataset: Option<(PathBuf, DatasetKind)>,
    pub out: PathBuf,
    pub prompt_mode: PromptModeArg,
    pub templates_dir: Option<PathBuf>,
}

/// Gold answers keyed by question id and by question text.
fn read_golds(args: &BacktraceArgs) -> Result<HashMap<String, Vec<String>>> {
    let mut golds = HashMap::new();
    if let Some(path) = &args.golds {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read golds {}", path.display()))?;
        let Value::Object(map) = serde_json::from_str(&text)
            .with_context(|| format!("invalid golds {}", path.display()))?
        else {
            bail!("golds file must be a JSON object of question -> answers");
        };
        for (key, value) in map {
            let answers = match value {
                Value::String(s) => vec![s],
                Value::Array(items) => items
                    .into_iter()
                    .map(|v| v.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .with_context(|| format!("golds for {key:?} must be strings"))?,
                _ => bail!("golds for {key:?} must be a string or a list of strings"),
            };
            golds.insert(key, answers);
        }
    } else if let Some((path, kind)) = &args.dataset {
        let items = load_dataset(*kind, path)
            .with_context(|| format!("cannot load dataset {}", path.display()))?;
        for item in items {
            golds.insert(item.question.clone(), item.golds.clone());
            golds.insert(item.id, item.golds);
        }
    } else {
        bail!("backtrace needs gold answers: pass --golds or --dataset");
    }
    Ok(golds)
}

#[derive(Serialize)]
struct Included {
    question: String,
    exploration_examples: usize,
    completion_examples: usize,
    filtered_tokens: usize,
    all_tokens: usize,
    fa: f64,
}

#[derive(Serialize)]
struct Excluded {
    question: String,
    reason: &'static str,
}

#[derive(Serialize)]
struct BacktraceStats {
    trajectories: usize,
    examples: usize,
    mean_fa: f64,
    included: Vec<Included>,
    excluded: Vec<Excluded>,
}

fn label(t: &Trajectory) -> String {
    t.id.clone().unwrap_or_else(|| t.question.clone())
}

pub fn backtrace(args: &BacktraceArgs) -> Result<ExitCode> {
    let golds = read_golds(args)?;
    if !args.trajectories.is_dir() {
        bail!(
            "trajectory directory not found: {}",
            args.trajectories.display()
        );
    }
    let trajectories = read_trajectories(&args.trajectories)?;
    if trajectories.is_empty() {
        tracing::warn!(dir = %args.trajectories.display(), "no trajectories found; writing an empty dataset");
    }
    let templates = match &args.templates_dir {
        Some(dir) => Templates::load(dir)?,
        None => Templates::builtin(),
    };

    let mut examples = Vec::new();
    let mut stats = BacktraceStats {
        trajectories: trajectories.len(),
        examples: 0,
        mean_fa: 0.0,
        included: Vec::new(),
        excluded: Vec::new(),
    };
    for (_, t) in &trajectories {
        let gold =
            t.id.as_ref()
                .and_then(|id| golds.get(id))
                .or_else(|| golds.get(&t.question));
        let reason = match gold {
            _ if t.is_failed() => Some("failed"),
            None => Some("no gold answer"),
            Some(g) if exact_match(t.prediction(), g) != 1 => Some("incorrect"),
            Some(_) => None,
        };
        let mode = match args.prompt_mode {
            PromptModeArg::Verbatim => PromptMode::Verbatim,
            PromptModeArg::Rerender => PromptMode::Rerender {
                templates: &templates,
                strategy: t.config.strategy,
            },
        };
        let report = match reason {
            Some(reason) => Err(reason),
            None => backtrace_one(t, mode).map_err(|_| "no answer"),
        };
        match report {
            Err(reason) => stats.excluded.push(Excluded {
                question: label(t),
                reason,
            }),
            Ok(report) => {
                let count = |kind| report.examples.iter().filter(|e| e.kind == kind).count();
                stats.included.push(Included {
                    question: label(t),
                    exploration_examples: count(ExampleKind::Exploration),
                    completion_examples: count(ExampleKind::Completion),
                    filtered_tokens: report.tokens.filtered,
                    all_tokens: report.tokens.all,
                    fa: report.fa_ratio(),
                });
                examples.extend(report.examples);
            }
        }
    }
    stats.examples = examples.len();
    if !stats.included.is_empty() {
        stats.mean_fa =
            stats.included.iter().map(|i| i.fa).sum::<f64>() / stats.included.len() as f64;
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    write_supervision(&args.out.join("supervision.jsonl"), &examples)?;
    write_json(&args.out.join("backtrace_stats.json"), &stats)?;
    for e in &stats.excluded {
        eprintln!("excluded {}: {}", e.question, e.reason);
    }
    println!(
        "{} of {} trajectories used, {} examples, mean FA {:.4}",
        stats.included.len(),
        stats.trajectories,
        stats.examples,
        stats.mean_fa
    );
    Ok(ExitCode::SUCCESS)
}

pub fn bootstrap(
    cfg: &ConfigArgs,
    data: &DatasetArgs,
    out: Option<PathBuf>,
    rounds: usize,
    hook: &TrainHook,
    parallel: usize,
    prompt_mode: PromptModeArg,
) -> Result<ExitCode> {
    let config = RunConfig::resolve(cfg)?;
    let dataset = LabeledDataset::from_qa_items(&load_items(data)?)?;
    let stack = Stack::new(&config)?;
    let out = out_dir(out, &config);
    let mode = match prompt_mode {
        PromptModeArg::Verbatim => PromptMode::Verbatim,
        PromptModeArg::Rerender => PromptMode::Rerender {
            templates: &stack.templates,
            strategy: config.engine.strategy,
        },
    };
    let setup = RoundSetup {
        retriever: stack.retriever.as_ref(),
        templates: &stack.templates,
        config: &config.engine,
        prompt_mode: mode,
        width: parallel,
        out_dir: &out,
    };
    let factory = |identity: &str| {
        config
            .backend_with_identity(Some(identity))
            .map_err(|e| format!("{e:#}"))
    };
    let result = run_bootstrap(
        &dataset,
        rounds,
        hook,
        stack.backend.as_ref(),
        &factory,
        &setup,
    );
    let (reports, error) = match result {
        Ok(reports) => (reports, None),
        Err(BootstrapError::BootstrapAborted {
            round,
            reason,
            reports,
        }) => (reports, Some(format!("aborted in round {round}: {reason}"))),
        Err(e) => return Err(e.into()),
    };
    write_json(&out.join("bootstrap_reports.json"), &reports)?;
    for r in &reports {
        print_round(r);
    }
    if let Some(error) = error {
        eprintln!("bootstrap {error}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(exit_for(reports.iter().map(|r| r.failed).sum()))
}

fn print_round(r: &RoundReport) {
    println!(
        "round {}: {}/{} correct, {} exploration + {} completion examples, mean FA {:.4}, {} -> {}, data {}",
        r.round,
        r.correct,
        r.attempted,
        r.exploration_examples,
        r.completion_examples,
        r.mean_fa,
        r.backend_before,
        r.backend_after,
        r.dataset_path.display()
    );
}

#[derive(Debug, Clone, Serialize)]
struct StatsRow {
    question: String,
    iterations: usize,
    pairs: usize,
    triplets: usize,
    retrievals: usize,
    passage_tokens: Option<usize>,
    fa: Option<f64>,
}

#[derive(Debug, Serialize)]
struct StatsMeans {
    iterations: f64,
    pairs: f64,
    triplets: f64,
    retrievals: f64,
    passage_tokens: Option<f64>,
    fa: Option<f64>,
    pairs_per_exploration: f64,
    triplets_per_completion: f64,
}

#[derive(Debug, Serialize)]
struct StatsTable {
    rows: Vec<StatsRow>,
    means: Option<StatsMeans>,
}

fn stats_row(t: &Trajectory, passage_tokens: Option<&HashMap<String, usize>>) -> StatsRow {
    let records = || t.iterations.iter().flat_map(|it| &it.pair_records);
    let pairs = t
        .iterations
        .iter()
        .map(|it| match &it.outcome {
            ExplorationOutcome::Expand { pairs } => pairs.len(),
            ExplorationOutcome::Sufficient { .. } => 0,
        })
        .sum();
    StatsRow {
        question: label(t),
        iterations: t.iterations.len(),
        pairs,
        triplets: records().map(|r| r.completion_triplets.len()).sum(),
        retrievals: records().count(),
        passage_tokens: passage_tokens.map(|tokens| {
            records()
                .flat_map(|r| &r.passage_ids)
                .map(|id| tokens.get(id).copied().unwrap_or(0))
                .sum()
        }),
        fa: trace(t).ok().map(|s| fa_ratio(t, &s)),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn stats_table(
    trajectories: &[Trajectory],
    passage_tokens: Option<&HashMap<String, usize>>,
) -> StatsTable {
    let rows: Vec<StatsRow> = trajectories
        .iter()
        .map(|t| stats_row(t, passage_tokens))
        .collect();
    let means = (!rows.is_empty()).then(|| {
        let explorations = trajectories
            .iter()
            .flat_map(|t| &t.iterations)
            .filter(|it| !it.outcome.is_sufficient())
            .count();
        let total = |f: fn(&StatsRow) -> usize| rows.iter().map(f).sum::<usize>() as f64;
        let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
        StatsMeans {
            iterations: total(|r| r.iterations) / rows.len() as f64,
            pairs: total(|r| r.pairs) / rows.len() as f64,
            triplets: total(|r| r.triplets) / rows.len() as f64,
            retrievals: total(|r| r.retrievals) / rows.len() as f64,
            passage_tokens: mean(
                rows.iter()
                    .filter_map(|r| r.passage_tokens.map(|v| v as f64)),
            ),
            fa: mean(rows.iter().filter_map(|r| r.fa)),
            pairs_per_exploration: ratio(total(|r| r.pairs), explorations),
            triplets_per_completion: ratio(total(|r| r.triplets), total(|r| r.retrievals) as usize),
        }
    });
    StatsTable { rows, means }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn print_stats(table: &StatsTable) {
    println!("question\titerations\tpairs\ttriplets\tretrievals\tpassage_tokens\tfa");
    for r in &table.rows {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.question,
            r.iterations,
            r.pairs,
            r.triplets,
            r.retrievals,
            opt(r.passage_tokens),
            opt(r.fa.map(|f| format!("{f:.4}")))
        );
    }
    if let Some(m) = &table.means {
        println!(
            "mean\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{}\t{}",
            m.iterations,
            m.pairs,
            m.triplets,
            m.retrievals,
            opt(m.passage_tokens.map(|v| format!("{v:.1}"))),
            opt(m.fa.map(|f| format!("{f:.4}")))
        );
        println!(
            "pairs/exploration {:.2}  triplets/completion {:.2}",
            m.pairs_per_exploration, m.triplets_per_completion
        );
    }
}

pub fn stats(run: &Path, corpus: Option<&Path>, json: Option<&Path>) -> Result<ExitCode> {
    let nested = run.join("trajectories");
    let dir = if nested.is_dir() {
        nested
    } else {
        run.to_path_buf()
    };
    if !dir.is_dir() {
        bail!("run directory not found: {}", run.display());
    }
    let trajectories: Vec<Trajectory> = read_trajectories(&dir)?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let passage_tokens = match corpus {
        Some(path) => Some(
            read_corpus(path)?
                .into_iter()
                .map(|p| {
                    let n = p.title.split_whitespace().count() + p.text.split_whitespace().count();
                    (p.id, n)
                })
                .collect::<HashMap<_, _>>(),
        ),
        None => None,
    };
    let table = stats_table(&trajectories, passage_tokens.as_ref());
    print_stats(&table);
    if let Some(path) = json {
        write_json(path, &table)?;
    }
    Ok(ExitCode::SUCCESS)
}
