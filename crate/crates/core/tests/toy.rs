mod common;

use std::collections::{BTreeSet, HashSet};
use std::time::Instant;

use common::*;
use knowtrace_core::backtrace::{
    backtrace, fa_ratio, filter_completion, filter_exploration, trace, CompletionFilter,
    ExampleKind, ExplorationFilter, PromptMode,
};
use knowtrace_core::lmio::{parse_completion, parse_exploration, RawTriple};
use knowtrace_core::{ExpansionPair, FinalState, RenderStrategy};

const RIOT: &str = "the rioting being a dividing factor in birmingham";

fn expected_kg() -> BTreeSet<(String, String, String)> {
    [
        key("james watt", "wrote", RIOT),
        key("james watt", "is", "an industrialist"),
        key(RIOT, "refers to", "priestley riots"),
        key(
            "birmingham",
            "is located in",
            "the west midlands region of england",
        ),
        key("james watt", "was educated at", "university of glasgow"),
    ]
    .into_iter()
    .collect()
}

#[test]
fn toy_question_answers_in_three_iterations() {
    let start = Instant::now();
    let t = toy_trajectory(RenderStrategy::Triplets);
    let elapsed = start.elapsed();
    match &t.final_state {
        FinalState::Answered { answer, .. } => assert_eq!(answer, "University of Glasgow"),
        other => panic!("unexpected final state {other:?}"),
    }
    assert_eq!(t.iterations.len(), 3);
    let keys: BTreeSet<_> = t.kg.keys().iter().cloned().collect();
    assert_eq!(keys, expected_kg());
    assert_eq!(t.kg.len(), 5);
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
}

#[test]
fn paths_strategy_reaches_the_same_answer() {
    let t = toy_trajectory(RenderStrategy::Paths);
    assert_eq!(t.prediction(), "University of Glasgow");
    let keys: BTreeSet<_> = t.kg.keys().iter().cloned().collect();
    assert_eq!(keys, expected_kg());
}

#[test]
fn toy_initials_and_targets() {
    let t = toy_trajectory(RenderStrategy::Triplets);
    let initials: BTreeSet<String> = [RIOT, "birmingham"].iter().map(|s| s.to_string()).collect();
    assert_eq!(t.kg.initial_entities(), &initials);
    let support = trace(&t).unwrap();
    let targets: BTreeSet<String> = ["james watt", RIOT, "birmingham", "university of glasgow"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert_eq!(support.target_entities, targets);
}

#[test]
fn toy_support_subgraph_is_the_two_supporting_triplets() {
    let t = toy_trajectory(RenderStrategy::Triplets);
    let support = trace(&t).unwrap();
    let got: BTreeSet<_> = support.keys(&t.kg).into_iter().collect();
    let want: BTreeSet<_> = [
        key("james watt", "wrote", RIOT),
        key("james watt", "was educated at", "university of glasgow"),
    ]
    .into_iter()
    .collect();
    assert_eq!(got, want);
}

#[test]
fn toy_filters() {
    let t = toy_trajectory(RenderStrategy::Triplets);
    let support = trace(&t).unwrap();
    let keys: HashSet<_> = support.keys(&t.kg);

    let first = filter_exploration(&t.iterations[0], &keys);
    assert_eq!(
        first,
        ExplorationFilter::Expand {
            kept: vec![ExpansionPair::new(
                "The rioting being a dividing factor in Birmingham",
                "Find out who wrote about this topic and what this rioting refers to."
            )],
            removed: vec![2],
        }
    );
    assert_eq!(
        filter_exploration(&t.iterations[2], &keys),
        ExplorationFilter::KeepSufficient
    );

    let riot = &t.iterations[0].pair_records[0];
    assert_eq!(
        filter_completion(riot, &keys),
        CompletionFilter::Keep(vec![RawTriple::new(
            "James Watt",
            "wrote",
            "the rioting being a dividing factor in Birmingham"
        )])
    );
    assert_eq!(
        filter_completion(&t.iterations[0].pair_records[1], &keys),
        CompletionFilter::Drop
    );
}

#[test]
fn toy_supervision_examples() {
    let t = toy_trajectory(RenderStrategy::Triplets);
    let report = backtrace(&t, PromptMode::Verbatim).unwrap();
    let explorations: Vec<_> = report
        .examples
        .iter()
        .filter(|e| e.kind == ExampleKind::Exploration)
        .collect();
    let completions: Vec<_> = report
        .examples
        .iter()
        .filter(|e| e.kind == ExampleKind::Completion)
        .collect();
    assert_eq!(explorations.len(), 3);
    assert_eq!(completions.len(), 2);
    for (ex, it) in explorations.iter().zip(&t.iterations) {
        assert_eq!(ex.prompt, it.exploration_prompt);
        parse_exploration(&ex.target).unwrap();
    }
    match parse_exploration(&explorations[0].target).unwrap() {
        knowtrace_core::ExplorationOutcome::Expand { pairs } => assert_eq!(pairs.len(), 1),
        other => panic!("{other:?}"),
    }
    for ex in completions {
        let parsed = parse_completion(&ex.target);
        assert_eq!(parsed.triplets.len(), 1);
        assert!(parsed.skipped.is_empty());
    }
}

/// Whitespace-token oracle over the scripted generations, independent of
/// the library's tally.
fn hand_fa() -> f64 {
    let words = |s: &str| s.split_whitespace().count();
    let script: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(toy_dir().join("script.json")).unwrap())
            .unwrap();
    let outputs: Vec<&str> = script["responses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let all: usize = outputs.iter().map(|o| words(o)).sum();
    let filtered = words("- Birmingham: Find out where Birmingham is located.")
        + words("(James Watt, is, an industrialist);")
        + words("(the rioting being a dividing factor in Birmingham, refers to, Priestley Riots);")
        + words(outputs[2]);
    filtered as f64 / all as f64
}

#[test]
fn toy_fa_ratio_matches_hand_count() {
    let t = toy_trajectory(RenderStrategy::Triplets);
    let support = trace(&t).unwrap();
    let report = backtrace(&t, PromptMode::Verbatim).unwrap();
    assert_eq!(report.tokens.filtered, 35);
    assert_eq!(report.tokens.all, 119);
    assert_eq!(fa_ratio(&t, &support), hand_fa());
    assert_eq!(fa_ratio(&t, &support), 35.0 / 119.0);
}

#[test]
fn rerendered_prompts_show_only_supporting_knowledge() {
    let templates = knowtrace_core::Templates::builtin();
    let t = toy_trajectory(RenderStrategy::Triplets);
    let report = backtrace(
        &t,
        PromptMode::Rerender {
            templates: &templates,
            strategy: RenderStrategy::Triplets,
        },
    )
    .unwrap();
    let last = report
        .examples
        .iter()
        .rfind(|e| e.kind == ExampleKind::Exploration)
        .unwrap();
    assert!(last.prompt.contains("was educated at"));
    assert!(!last.prompt.contains("industrialist"));
    assert!(!last.prompt.contains("West Midlands"));
}
