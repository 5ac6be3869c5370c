//! Iterative retrieval-augmented reasoning over a question-specific
//! knowledge graph, with reflective backtracing of positive trajectories
//! into process-supervision data.

pub mod backtrace;
pub mod bootstrap;
pub mod engine;
pub mod evalkit;
pub mod kg;
pub mod lmio;
pub mod retrieval;

pub use engine::{Engine, EngineConfig, FinalState, Trajectory};
pub use kg::{KgContext, RenderStrategy, Triplet};
pub use lmio::{ExpansionPair, ExplorationOutcome, GenerationBackend, ScriptedBackend, Templates};
pub use retrieval::{Bm25Retriever, CorpusIndex, Passage, Retriever};
