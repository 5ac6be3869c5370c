//! Line-oriented output grammar for the two generation steps.
//!
//! Exploration:
//!
//! ```text
//! Sufficient: Yes            Sufficient: No
//! Thought: <text>            Expand:
//! Answer: <text>             - <entity>: <relation hint>
//!                            - ...
//! ```
//!
//! Completion: one `(subject | relation | object)` per line, or `None`. The
//! comma form `(subject, relation, object)` is accepted on input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::normalize_entity;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}")]
pub struct ParseError {
    pub reason: String,
    pub raw: String,
}

impl ParseError {
    fn new(reason: impl Into<String>, raw: &str) -> Self {
        Self {
            reason: reason.into(),
            raw: raw.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionPair {
    pub entity: String,
    pub relation_hint: String,
}

impl ExpansionPair {
    pub fn new(entity: impl Into<String>, relation_hint: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            relation_hint: relation_hint.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum ExplorationOutcome {
    Sufficient { thought: String, answer: String },
    Expand { pairs: Vec<ExpansionPair> },
}

impl ExplorationOutcome {
    pub fn is_sufficient(&self) -> bool {
        matches!(self, Self::Sufficient { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl RawTriple {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionOutcome {
    pub triplets: Vec<RawTriple>,
    /// Non-empty lines that matched neither triple form nor `None`.
    pub skipped: Vec<String>,
}

/// Classification of one line of completion output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompletionLine {
    Triple(RawTriple),
    Blank,
    Skipped,
}

fn split_key(line: &str) -> Option<(String, &str)> {
    let (key, rest) = line.split_once(':')?;
    Some((key.trim().to_lowercase(), rest.trim()))
}

fn is_sufficient_key(key: &str) -> bool {
    key == "sufficient" || key.ends_with(" sufficient")
}

/// The exploration item lines in order, paired with the pair each produced.
/// Items whose entity is blank are not returned.
pub(crate) fn exploration_items(raw: &str) -> Vec<(&str, ExpansionPair)> {
    let mut lines = raw.lines();
    for line in lines.by_ref() {
        if split_key(line).is_some_and(|(k, _)| is_sufficient_key(&k)) {
            break;
        }
    }
    let mut items = Vec::new();
    for line in lines {
        let trimmed = line.trim();
        let Some(item) = trimmed.strip_prefix('-') else {
            continue;
        };
        let (entity, hint) = match item.split_once(':') {
            Some((e, h)) => (e.trim(), h.trim()),
            None => (item.trim(), ""),
        };
        if normalize_entity(entity).is_ok() {
            items.push((line, ExpansionPair::new(entity, hint)));
        }
    }
    items
}

pub fn parse_exploration(raw: &str) -> Result<ExplorationOutcome, ParseError> {
    let lines: Vec<&str> = raw.lines().collect();
    let (flag_at, flag) = lines
        .iter()
        .enumerate()
        .find_map(|(i, line)| {
            split_key(line)
                .filter(|(k, _)| is_sufficient_key(k))
                .map(|(_, v)| (i, v.trim_end_matches('.').to_lowercase()))
        })
        .ok_or_else(|| ParseError::new("missing `Sufficient:` line", raw))?;

    match flag.as_str() {
        "yes" => {
            let rest = &lines[flag_at + 1..];
            let answer_at = rest
                .iter()
                .position(|l| split_key(l).is_some_and(|(k, _)| k == "answer"))
                .ok_or_else(|| ParseError::new("sufficient outcome without `Answer:`", raw))?;
            let answer = split_key(rest[answer_at]).map(|(_, v)| v).unwrap_or("");
            if answer.is_empty() {
                return Err(ParseError::new("empty answer", raw));
            }
            let mut thought_lines = Vec::new();
            if let Some(start) = rest[..answer_at]
                .iter()
                .position(|l| split_key(l).is_some_and(|(k, _)| k == "thought"))
            {
                thought_lines.push(split_key(rest[start]).map(|(_, v)| v).unwrap_or(""));
                thought_lines.extend(
                    rest[start + 1..answer_at]
                        .iter()
                        .map(|l| l.trim())
                        .filter(|l| !l.is_empty()),
                );
            }
            Ok(ExplorationOutcome::Sufficient {
                thought: thought_lines.join("\n").trim().to_string(),
                answer: answer.to_string(),
            })
        }
        "no" => {
            let pairs: Vec<ExpansionPair> =
                exploration_items(raw).into_iter().map(|(_, p)| p).collect();
            if pairs.is_empty() {
                return Err(ParseError::new(
                    "expand outcome without any `- entity: hint` item",
                    raw,
                ));
            }
            Ok(ExplorationOutcome::Expand { pairs })
        }
        other => Err(ParseError::new(
            format!("`Sufficient:` must be Yes or No, got {other:?}"),
            raw,
        )),
    }
}

pub fn render_exploration(outcome: &ExplorationOutcome) -> String {
    match outcome {
        ExplorationOutcome::Sufficient { thought, answer } => {
            format!("Sufficient: Yes\nThought: {thought}\nAnswer: {answer}")
        }
        ExplorationOutcome::Expand { pairs } => {
            let mut out = String::from("Sufficient: No\nExpand:");
            for p in pairs {
                out.push_str("\n- ");
                out.push_str(&p.entity);
                out.push_str(": ");
                out.push_str(&p.relation_hint);
            }
            out
        }
    }
}

fn parse_triple_line(line: &str) -> CompletionLine {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.trim_end_matches('.').eq_ignore_ascii_case("none") {
        return CompletionLine::Blank;
    }
    let body = trimmed.trim_end_matches([';', ',', '.']).trim_end();
    let Some(inner) = body.strip_prefix('(').and_then(|b| b.strip_suffix(')')) else {
        return CompletionLine::Skipped;
    };
    let fields: Option<(&str, &str, &str)> = if inner.contains('|') {
        let parts: Vec<&str> = inner.split('|').collect();
        match parts[..] {
            [s, r, o] => Some((s, r, o)),
            _ => None,
        }
    } else {
        let mut depth = 0i32;
        let mut commas = Vec::new();
        for (i, c) in inner.char_indices() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                ',' if depth == 0 => commas.push(i),
                _ => {}
            }
        }
        match (commas.first(), commas.last()) {
            (Some(&first), Some(&last)) if first < last => {
                Some((&inner[..first], &inner[first + 1..last], &inner[last + 1..]))
            }
            _ => None,
        }
    };
    match fields {
        Some((s, r, o)) => {
            let (s, r, o) = (s.trim(), r.trim(), o.trim());
            if s.is_empty() || r.is_empty() || o.is_empty() {
                CompletionLine::Skipped
            } else {
                CompletionLine::Triple(RawTriple::new(s, r, o))
            }
        }
        None => CompletionLine::Skipped,
    }
}

/// Classifies every line of a completion generation.
pub fn parse_completion_lines(raw: &str) -> Vec<(&str, CompletionLine)> {
    raw.lines().map(|l| (l, parse_triple_line(l))).collect()
}

/// Never fails: unparseable lines end up in `skipped`.
pub fn parse_completion(raw: &str) -> CompletionOutcome {
    let mut out = CompletionOutcome::default();
    for (line, parsed) in parse_completion_lines(raw) {
        match parsed {
            CompletionLine::Triple(t) => out.triplets.push(t),
            CompletionLine::Blank => {}
            CompletionLine::Skipped => out.skipped.push(line.trim().to_string()),
        }
    }
    out
}

pub fn render_completion(triplets: &[RawTriple]) -> String {
    if triplets.is_empty() {
        return "None".to_string();
    }
    triplets
        .iter()
        .map(|t| format!("({} | {} | {})", t.subject, t.relation, t.object))
        .collect::<Vec<_>>()
        .join("\n")
}
