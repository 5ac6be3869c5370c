mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use knowtrace_core::backtrace::PromptMode;
use knowtrace_core::bootstrap::{
    collect_round, read_supervision, run_bootstrap, BootstrapError, LabeledDataset, LabeledItem,
    RoundSetup, TrainHook,
};
use knowtrace_core::evalkit::{parse_dataset, DatasetKind};
use knowtrace_core::lmio::{GenerationBackend, ScriptedBackend};
use knowtrace_core::retrieval::Bm25Retriever;
use knowtrace_core::{EngineConfig, RenderStrategy, Templates};

fn mini_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini")
}

fn mini_dataset(indices: &[usize]) -> LabeledDataset {
    let text = fs::read_to_string(mini_dir().join("dataset.json")).unwrap();
    let items = parse_dataset(DatasetKind::HotpotQa, &text).unwrap();
    let picked: Vec<_> = indices.iter().map(|&i| items[i].clone()).collect();
    LabeledDataset::from_qa_items(&picked).unwrap()
}

fn mini_backend(identity: &str) -> ScriptedBackend {
    ScriptedBackend::from_file(&mini_dir().join("script.json"))
        .unwrap()
        .with_identity(identity)
}

struct Mini {
    retriever: Bm25Retriever,
    templates: Templates,
    config: EngineConfig,
}

impl Mini {
    fn new() -> Self {
        Self {
            retriever: Bm25Retriever::from_corpus_file(&mini_dir().join("corpus.jsonl")).unwrap(),
            templates: Templates::builtin(),
            config: EngineConfig {
                passages_per_query: 2,
                ..EngineConfig::default()
            },
        }
    }

    fn setup<'a>(&'a self, out: &'a Path) -> RoundSetup<'a> {
        RoundSetup {
            retriever: &self.retriever,
            templates: &self.templates,
            config: &self.config,
            prompt_mode: PromptMode::Verbatim,
            width: 2,
            out_dir: out,
        }
    }
}

#[test]
fn toy_round_yields_five_examples_and_the_fixture_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = LabeledDataset::new(vec![LabeledItem {
        id: "toy".into(),
        question: TOY_QUESTION.into(),
        golds: vec!["University of Glasgow".into()],
    }])
    .unwrap();
    let retriever = toy_retriever();
    let templates = Templates::builtin();
    let config = toy_config(RenderStrategy::Triplets);
    let setup = RoundSetup {
        retriever: &retriever,
        templates: &templates,
        config: &config,
        prompt_mode: PromptMode::Verbatim,
        width: 1,
        out_dir: dir.path(),
    };
    let report = collect_round(1, &dataset, &toy_backend(), &setup).unwrap();
    assert_eq!((report.attempted, report.correct), (1, 1));
    assert_eq!(report.exploration_examples, 3);
    assert_eq!(report.completion_examples, 2);
    assert_eq!(report.mean_fa, 35.0 / 119.0);
    assert_eq!(read_supervision(&report.dataset_path).unwrap().len(), 5);
    assert!(dir.path().join("round-1/report.json").exists());
}

#[test]
fn only_correct_trajectories_contribute() {
    let dir = tempfile::tempdir().unwrap();
    let mini = Mini::new();
    // Item 3 is scripted to answer wrongly.
    let report = collect_round(
        1,
        &mini_dataset(&[2, 3, 4]),
        &mini_backend("m"),
        &mini.setup(dir.path()),
    )
    .unwrap();
    assert_eq!((report.attempted, report.correct), (3, 2));
    let examples = read_supervision(&report.dataset_path).unwrap();
    let origins: std::collections::BTreeSet<_> =
        examples.iter().map(|e| e.origin.question.clone()).collect();
    assert_eq!(origins.len(), 2);
    assert!(!origins.contains("mini-03"));
    assert!(report.mean_fa > 0.0 && report.mean_fa < 1.0);
}

#[test]
fn all_incorrect_gives_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let mini = Mini::new();
    let report = collect_round(
        1,
        &mini_dataset(&[3, 7]),
        &mini_backend("m"),
        &mini.setup(dir.path()),
    )
    .unwrap();
    assert_eq!(report.correct, 0);
    assert_eq!(report.mean_fa, 0.0);
    assert_eq!(fs::read_to_string(&report.dataset_path).unwrap(), "");
}

fn sh_hook(script: &str) -> TrainHook {
    TrainHook::Command {
        program: "sh".into(),
        args: vec!["-c".into(), script.into(), "hook".into()],
    }
}

fn factory(identity: &str) -> Result<Box<dyn GenerationBackend>, String> {
    Ok(Box::new(mini_backend(identity)))
}

#[test]
fn two_rounds_swap_identity_and_always_train_from_base() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("hook.log");
    let mini = Mini::new();
    let out = dir.path().join("boot");
    let hook = sh_hook(&format!(
        "echo \"$2 $4 $6\" >> '{}'; echo training; echo tuned-r$6",
        log.display()
    ));
    let reports = run_bootstrap(
        &mini_dataset(&[0, 1, 2]),
        2,
        &hook,
        &mini_backend("base-model"),
        &factory,
        &mini.setup(&out),
    )
    .unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[0].backend_before, "base-model");
    assert_eq!(reports[0].backend_after, "tuned-r1");
    assert_eq!(reports[1].backend_before, "tuned-r1");
    assert_eq!(reports[1].backend_after, "tuned-r2");
    let calls: Vec<String> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(calls.len(), 2);
    for (k, call) in calls.iter().enumerate() {
        let parts: Vec<&str> = call.split(' ').collect();
        assert_eq!(parts[0], "base-model");
        assert!(parts[1].ends_with(&format!("round-{}/supervision.jsonl", k + 1)));
        assert_eq!(parts[2], (k + 1).to_string());
    }
    assert_ne!(reports[0].dataset_path, reports[1].dataset_path);
    assert!(reports[0].dataset_path.exists() && reports[1].dataset_path.exists());
}

#[test]
fn emit_only_stops_after_the_first_round() {
    let dir = tempfile::tempdir().unwrap();
    let mini = Mini::new();
    let reports = run_bootstrap(
        &mini_dataset(&[0, 1]),
        3,
        &TrainHook::EmitOnly,
        &mini_backend("base-model"),
        &factory,
        &mini.setup(dir.path()),
    )
    .unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].backend_after, "base-model");
    assert!(!dir.path().join("round-2").exists());
}

#[test]
fn hook_failure_in_round_two_keeps_round_one() {
    let dir = tempfile::tempdir().unwrap();
    let mini = Mini::new();
    let hook = sh_hook("if [ \"$6\" = 2 ]; then echo boom >&2; exit 3; fi; echo tuned");
    let err = run_bootstrap(
        &mini_dataset(&[0]),
        3,
        &hook,
        &mini_backend("base-model"),
        &factory,
        &mini.setup(dir.path()),
    )
    .unwrap_err();
    match err {
        BootstrapError::BootstrapAborted {
            round,
            reports,
            reason,
        } => {
            assert_eq!(round, 2);
            assert_eq!(reports.len(), 1);
            assert_eq!(reports[0].round, 1);
            assert!(reason.contains("boom"), "{reason}");
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn zero_rounds_and_empty_dataset_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mini = Mini::new();
    let setup = mini.setup(dir.path());
    let base = mini_backend("b");
    assert!(matches!(
        run_bootstrap(
            &mini_dataset(&[0]),
            0,
            &TrainHook::EmitOnly,
            &base,
            &factory,
            &setup
        ),
        Err(BootstrapError::NoRounds)
    ));
    assert!(matches!(
        run_bootstrap(
            &LabeledDataset::default(),
            1,
            &TrainHook::EmitOnly,
            &base,
            &factory,
            &setup
        ),
        Err(BootstrapError::EmptyDataset)
    ));
}
