#![allow(dead_code)]

use std::path::PathBuf;

use knowtrace_core::lmio::ScriptedBackend;
use knowtrace_core::retrieval::{read_corpus, Bm25Retriever, CorpusIndex};
use knowtrace_core::{Engine, EngineConfig, RenderStrategy, Templates, Trajectory};

pub const TOY_QUESTION: &str =
    "Where was the person who wrote about the rioting being a dividing factor in Birmingham educated?";

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

pub fn toy_retriever() -> Bm25Retriever {
    let passages = read_corpus(&toy_dir().join("corpus.jsonl")).unwrap();
    Bm25Retriever::new(CorpusIndex::build(passages).unwrap())
}

pub fn toy_backend() -> ScriptedBackend {
    ScriptedBackend::from_file(&toy_dir().join("script.json")).unwrap()
}

pub fn toy_config(strategy: RenderStrategy) -> EngineConfig {
    EngineConfig {
        passages_per_query: 2,
        strategy,
        ..EngineConfig::default()
    }
}

pub fn toy_trajectory(strategy: RenderStrategy) -> Trajectory {
    let backend = toy_backend();
    let retriever = toy_retriever();
    let templates = Templates::builtin();
    let config = toy_config(strategy);
    let engine = Engine::new(&backend, &retriever, &templates, &config).unwrap();
    engine.run_question(None, TOY_QUESTION)
}

pub fn key(s: &str, r: &str, o: &str) -> (String, String, String) {
    (s.to_string(), r.to_string(), o.to_string())
}
