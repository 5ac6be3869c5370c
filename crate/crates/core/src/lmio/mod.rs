//! Prompt construction, output grammar and generation backends.

mod backend;
mod grammar;
mod template;

pub use backend::{
    fingerprint, generate_with_retry, Attempt, BackendError, GenerationBackend, HttpBackend,
    LmError, Retried, ScriptedBackend, API_KEY_ENV, CORRECTIVE_SUFFIX,
};
pub(crate) use grammar::exploration_items;
pub use grammar::{
    parse_completion, parse_completion_lines, parse_exploration, render_completion,
    render_exploration, CompletionLine, CompletionOutcome, ExpansionPair, ExplorationOutcome,
    ParseError, RawTriple,
};
pub use template::{
    build_completion_prompt, build_exploration_prompt, PromptTemplate, TemplateError, TemplateKind,
    Templates,
};
