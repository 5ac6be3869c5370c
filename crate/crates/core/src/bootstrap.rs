//! Self-bootstrapping rounds: infer over labeled questions, keep correct
//! trajectories, backtrace them into supervision data and hand that data to
//! an external training command.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtrace::{backtrace, ExampleKind, PromptMode, SupervisionExample};
use crate::engine::{write_trajectory, Engine, EngineConfig, EngineError};
use crate::evalkit::{exact_match, QAItem};
use crate::lmio::{GenerationBackend, Templates};
use crate::retrieval::Retriever;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("labeled dataset is empty")]
    EmptyDataset,
    #[error("invalid labeled dataset: {0}")]
    InvalidDataset(String),
    #[error("round count must be at least 1")]
    NoRounds,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("cannot build backend {identity:?}: {message}")]
    Backend { identity: String, message: String },
    #[error("bootstrap aborted in round {round}: {reason}")]
    BootstrapAborted {
        round: usize,
        reason: String,
        reports: Vec<RoundReport>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledItem {
    pub id: String,
    pub question: String,
    pub golds: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabeledDataset {
    items: Vec<LabeledItem>,
}

impl LabeledDataset {
    /// Rejects duplicate ids and items without a gold answer.
    pub fn new(items: Vec<LabeledItem>) -> Result<Self, BootstrapError> {
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(BootstrapError::InvalidDataset(format!(
                    "duplicate id {:?}",
                    item.id
                )));
            }
            if item.golds.is_empty() {
                return Err(BootstrapError::InvalidDataset(format!(
                    "item {:?} has no gold answer",
                    item.id
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn from_qa_items(items: &[QAItem]) -> Result<Self, BootstrapError> {
        Self::new(
            items
                .iter()
                .map(|i| LabeledItem {
                    id: i.id.clone(),
                    question: i.question.clone(),
                    golds: i.golds.clone(),
                })
                .collect(),
        )
    }

    pub fn items(&self) -> &[LabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub attempted: usize,
    pub correct: usize,
    pub failed: usize,
    pub dataset_path: PathBuf,
    pub exploration_examples: usize,
    pub completion_examples: usize,
    /// Mean filtered-to-all ratio over the correct trajectories, 0 if none.
    pub mean_fa: f64,
    pub backend_before: String,
    pub backend_after: String,
}

pub fn write_supervision(path: &Path, examples: &[SupervisionExample]) -> io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_supervision(path: &Path) -> io::Result<Vec<SupervisionExample>> {
    let file = io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?,
        );
    }
    Ok(out)
}

/// Shared settings for every round.
#[derive(Clone, Copy)]
pub struct RoundSetup<'a> {
    pub retriever: &'a dyn Retriever,
    pub templates: &'a Templates,
    pub config: &'a EngineConfig,
    pub prompt_mode: PromptMode<'a>,
    pub width: usize,
    pub out_dir: &'a Path,
}

fn round_dir(out_dir: &Path, round: usize) -> PathBuf {
    out_dir.join(format!("round-{round}"))
}

/// Runs one round with `backend` and writes `round-{k}/supervision.jsonl`,
/// the trajectories and `round-{k}/report.json`.
pub fn collect_round(
    round: usize,
    dataset: &LabeledDataset,
    backend: &dyn GenerationBackend,
    setup: &RoundSetup<'_>,
) -> Result<RoundReport, BootstrapError> {
    if dataset.is_empty() {
        return Err(BootstrapError::EmptyDataset);
    }
    let engine = Engine::new(backend, setup.retriever, setup.templates, setup.config)?;
    let questions: Vec<(Option<String>, String)> = dataset
        .items()
        .iter()
        .map(|i| (Some(i.id.clone()), i.question.clone()))
        .collect();
    let trajectories = engine.run_batch(&questions, setup.width);

    let dir = round_dir(setup.out_dir, round);
    let traj_dir = dir.join("trajectories");
    fs::create_dir_all(&traj_dir)?;

    let mut examples = Vec::new();
    let mut correct = 0;
    let mut failed = 0;
    let mut fa_sum = 0.0;
    for (item, trajectory) in dataset.items().iter().zip(&trajectories) {
        write_trajectory(&traj_dir, trajectory)?;
        if trajectory.is_failed() {
            failed += 1;
            continue;
        }
        if exact_match(trajectory.prediction(), &item.golds) != 1 {
            continue;
        }
        let Ok(report) = backtrace(trajectory, setup.prompt_mode) else {
            continue;
        };
        correct += 1;
        fa_sum += report.fa_ratio();
        examples.extend(report.examples);
    }

    let dataset_path = dir.join("supervision.jsonl");
    write_supervision(&dataset_path, &examples)?;
    let count = |kind| examples.iter().filter(|e| e.kind == kind).count();
    let identity = backend.identity().to_string();
    let report = RoundReport {
        round,
        attempted: trajectories.len(),
        correct,
        failed,
        dataset_path,
        exploration_examples: count(ExampleKind::Exploration),
        completion_examples: count(ExampleKind::Completion),
        mean_fa: if correct == 0 {
            0.0
        } else {
            fa_sum / correct as f64
        },
        backend_before: identity.clone(),
        backend_after: identity,
    };
    write_report(&dir, &report)?;
    Ok(report)
}

fn write_report(dir: &Path, report: &RoundReport) -> io::Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(io::Error::from)?;
    fs::write(dir.join("report.json"), text + "\n")
}

/// What happens to each round's supervision file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainHook {
    /// Write the first round's data and stop.
    EmitOnly,
    /// Invoke `program args.. --base <id> --data <path> --round <k>`; the
    /// last non-empty stdout line is the trained backend identity.
    Command { program: String, args: Vec<String> },
}

impl TrainHook {
    fn invoke(&self, base: &str, data: &Path, round: usize) -> Result<Option<String>, String> {
        let TrainHook::Command { program, args } = self else {
            return Ok(None);
        };
        let output = Command::new(program)
            .args(args)
            .arg("--base")
            .arg(base)
            .arg("--data")
            .arg(data)
            .arg("--round")
            .arg(round.to_string())
            .output()
            .map_err(|e| format!("cannot start {program:?}: {e}"))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(format!(
                "{program:?} exited with {}: {}",
                output.status,
                stderr.trim()
            ));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        stdout
            .lines()
            .map(str::trim)
            .rfind(|l| !l.is_empty())
            .map(|l| Some(l.to_string()))
            .ok_or_else(|| format!("{program:?} printed no backend identity"))
    }
}

/// Builds a backend for an identity returned by the training hook.
pub type BackendFactory<'a> = dyn Fn(&str) -> Result<Box<dyn GenerationBackend>, String> + 'a;

/// Up to `rounds` rounds. Every round trains from the base identity; the
/// round after it runs on whatever backend the hook produced.
pub fn run_bootstrap(
    dataset: &LabeledDataset,
    rounds: usize,
    hook: &TrainHook,
    base: &dyn GenerationBackend,
    factory: &BackendFactory<'_>,
    setup: &RoundSetup<'_>,
) -> Result<Vec<RoundReport>, BootstrapError> {
    if rounds == 0 {
        return Err(BootstrapError::NoRounds);
    }
    if dataset.is_empty() {
        return Err(BootstrapError::EmptyDataset);
    }
    let base_identity = base.identity().to_string();
    let mut reports: Vec<RoundReport> = Vec::new();
    let mut trained: Option<Box<dyn GenerationBackend>> = None;
    for round in 1..=rounds {
        let backend: &dyn GenerationBackend = trained.as_deref().unwrap_or(base);
        let mut report = collect_round(round, dataset, backend, setup)?;
        match hook.invoke(&base_identity, &report.dataset_path, round) {
            Ok(None) => {
                reports.push(report);
                break;
            }
            Ok(Some(identity)) => {
                report.backend_after = identity.clone();
                write_report(&round_dir(setup.out_dir, round), &report)?;
                reports.push(report);
                if round < rounds {
                    let next = factory(&identity).map_err(|message| BootstrapError::Backend {
                        identity: identity.clone(),
                        message,
                    })?;
                    trained = Some(next);
                }
            }
            Err(reason) => {
                return Err(BootstrapError::BootstrapAborted {
                    round,
                    reason,
                    reports,
                })
            }
        }
    }
    Ok(reports)
}
