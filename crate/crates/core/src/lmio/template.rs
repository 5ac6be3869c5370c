use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::grammar::ExpansionPair;
use crate::retrieval::Passage;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("{kind:?} template must contain {placeholder} exactly once (found {count})")]
    Placeholder {
        kind: TemplateKind,
        placeholder: String,
        count: usize,
    },
    #[error("unresolved placeholder {{{{{0}}}}} in {1:?} template")]
    Unresolved(String, TemplateKind),
    #[error("wrong template kind: expected {expected:?}, got {got:?}")]
    WrongKind {
        expected: TemplateKind,
        got: TemplateKind,
    },
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateKind {
    Exploration,
    Completion,
}

impl TemplateKind {
    fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateKind::Exploration => &["QUESTION", "KNOWLEDGE"],
            TemplateKind::Completion => &["ENTITY", "RELATION", "PASSAGES"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    body: String,
    few_shots: Vec<String>,
}

impl PromptTemplate {
    pub fn new(
        kind: TemplateKind,
        body: impl Into<String>,
        few_shots: Vec<String>,
    ) -> Result<Self, TemplateError> {
        let body = body.into();
        for &name in kind.placeholders() {
            let token = format!("{{{{{name}}}}}");
            let count = body.matches(&token).count();
            if count != 1 {
                return Err(TemplateError::Placeholder {
                    kind,
                    placeholder: token,
                    count,
                });
            }
        }
        Ok(Self {
            kind,
            body,
            few_shots,
        })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn few_shots(&self) -> &[String] {
        &self.few_shots
    }

    /// Few-shot blocks in order, then the body with every placeholder
    /// substituted in a single pass (values are never rescanned).
    fn fill(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::new();
        for shot in &self.few_shots {
            out.push_str(shot.trim_end());
            out.push_str("\n\n");
        }
        let mut rest = self.body.as_str();
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            let Some(close) = after.find("}}") else {
                out.push_str(&rest[open..]);
                rest = "";
                break;
            };
            let name = &after[..close];
            let value = values
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::Unresolved(name.to_string(), self.kind))?;
            out.push_str(value);
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }

    fn expect(&self, kind: TemplateKind) -> Result<(), TemplateError> {
        if self.kind != kind {
            return Err(TemplateError::WrongKind {
                expected: kind,
                got: self.kind,
            });
        }
        Ok(())
    }
}

pub fn build_exploration_prompt(
    template: &PromptTemplate,
    question: &str,
    kg_rendering: &str,
) -> Result<String, TemplateError> {
    template.expect(TemplateKind::Exploration)?;
    template.fill(&[("QUESTION", question), ("KNOWLEDGE", kg_rendering)])
}

pub fn build_completion_prompt(
    template: &PromptTemplate,
    pair: &ExpansionPair,
    passages: &[Passage],
) -> Result<String, TemplateError> {
    template.expect(TemplateKind::Completion)?;
    let block = if passages.is_empty() {
        "No passages.".to_string()
    } else {
        passages
            .iter()
            .enumerate()
            .map(|(k, p)| format!("[{}] {}\n{}", k + 1, p.title, p.text))
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    template.fill(&[
        ("ENTITY", pair.entity.as_str()),
        ("RELATION", pair.relation_hint.as_str()),
        ("PASSAGES", block.as_str()),
    ])
}

const SHOT_SEPARATOR: &str = "===";

fn split_shots(text: &str) -> Vec<String> {
    let mut shots = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        if line.trim() == SHOT_SEPARATOR {
            shots.push(current.join("\n").trim().to_string());
            current.clear();
        } else {
            current.push(line);
        }
    }
    shots.push(current.join("\n").trim().to_string());
    shots.retain(|s| !s.is_empty());
    shots
}

/// The exploration and completion templates used by one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub exploration: PromptTemplate,
    pub completion: PromptTemplate,
}

impl Templates {
    pub const EXPLORATION_FILE: &'static str = "exploration.txt";
    pub const COMPLETION_FILE: &'static str = "completion.txt";
    pub const EXPLORATION_SHOTS_FILE: &'static str = "exploration_examples.txt";
    pub const COMPLETION_SHOTS_FILE: &'static str = "completion_examples.txt";

    /// Templates bundled with the crate.
    pub fn builtin() -> Self {
        Self::from_texts(
            include_str!("../../templates/exploration.txt"),
            include_str!("../../templates/exploration_examples.txt"),
            include_str!("../../templates/completion.txt"),
            include_str!("../../templates/completion_examples.txt"),
        )
        .expect("bundled templates are valid")
    }

    pub fn from_texts(
        exploration: &str,
        exploration_shots: &str,
        completion: &str,
        completion_shots: &str,
    ) -> Result<Self, TemplateError> {
        Ok(Self {
            exploration: PromptTemplate::new(
                TemplateKind::Exploration,
                exploration.trim_end(),
                split_shots(exploration_shots),
            )?,
            completion: PromptTemplate::new(
                TemplateKind::Completion,
                completion.trim_end(),
                split_shots(completion_shots),
            )?,
        })
    }

    /// Loads the four template files from `dir`. Example files are optional.
    pub fn load(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str, required: bool| -> Result<String, TemplateError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(text) => Ok(text),
                Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => {
                    Ok(String::new())
                }
                Err(e) => Err(TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                }),
            }
        };
        Self::from_texts(
            &read(Self::EXPLORATION_FILE, true)?,
            &read(Self::EXPLORATION_SHOTS_FILE, false)?,
            &read(Self::COMPLETION_FILE, true)?,
            &read(Self::COMPLETION_SHOTS_FILE, false)?,
        )
    }
}
