//! Answer metrics, benchmark adapters and corpus construction.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::engine::{read_trajectories, Trajectory};
use crate::retrieval::Passage;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("dataset format: {0}")]
    DatasetFormat(String),
    #[error("io: {0}")]
    Io(String),
}

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let pred = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| normalize_answer(g) == pred))
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(gold);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
    match (pred_tokens.is_empty(), gold_tokens.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred_tokens {
        if let Some(c) = gold_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_tokens.len() as f64;
    let recall = overlap as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-overlap F1, maximized over the gold aliases.
pub fn f1(prediction: &str, golds: &[String]) -> f64 {
    golds
        .iter()
        .map(|g| f1_single(prediction, g))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "hotpotqa")]
    HotpotQa,
    #[serde(rename = "2wiki")]
    TwoWiki,
    #[serde(rename = "musique")]
    Musique,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hotpotqa" | "hotpot" => Ok(Self::HotpotQa),
            "2wiki" | "2wikimultihopqa" => Ok(Self::TwoWiki),
            "musique" => Ok(Self::Musique),
            other => Err(format!(
                "unknown dataset kind {other:?} (hotpotqa, 2wiki, musique)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    pub golds: Vec<String>,
    pub passages: Vec<Passage>,
}

fn records(text: &str) -> Result<Vec<Value>, EvalError> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Err(EvalError::DatasetFormat("file is empty".into()));
    }
    if trimmed.starts_with('[') {
        return match serde_json::from_str(trimmed) {
            Ok(Value::Array(items)) => Ok(items),
            Ok(_) => Err(EvalError::DatasetFormat("expected a JSON array".into())),
            Err(e) => Err(EvalError::DatasetFormat(e.to_string())),
        };
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| EvalError::DatasetFormat(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn field<'a>(record: &'a Value, names: &[&str], at: usize) -> Result<&'a Value, EvalError> {
    names
        .iter()
        .find_map(|n| record.get(*n).filter(|v| !v.is_null()))
        .ok_or_else(|| EvalError::DatasetFormat(format!("item {at}: missing field {:?}", names[0])))
}

fn string_field(record: &Value, names: &[&str], at: usize) -> Result<String, EvalError> {
    let value = field(record, names, at)?;
    let s = match value {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => {
            return Err(EvalError::DatasetFormat(format!(
                "item {at}: field {:?} is not a string",
                names[0]
            )))
        }
    };
    if s.trim().is_empty() {
        return Err(EvalError::DatasetFormat(format!(
            "item {at}: field {:?} is empty",
            names[0]
        )));
    }
    Ok(s)
}

/// `[[title, [sentence, ...]], ...]` as used by HotpotQA and 2Wiki.
fn context_passages(record: &Value, id: &str, at: usize) -> Result<Vec<Passage>, EvalError> {
    let bad = || EvalError::DatasetFormat(format!("item {at}: malformed field \"context\""));
    let context = field(record, &["context"], at)?
        .as_array()
        .ok_or_else(bad)?;
    let mut out = Vec::new();
    for (ordinal, entry) in context.iter().enumerate() {
        let pair = entry.as_array().filter(|p| p.len() == 2).ok_or_else(bad)?;
        let title = pair[0].as_str().ok_or_else(bad)?;
        let text = match &pair[1] {
            Value::Array(sentences) => sentences
                .iter()
                .map(|s| s.as_str().map(str::trim).ok_or_else(bad))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
                .join(" "),
            Value::String(s) => s.trim().to_string(),
            _ => return Err(bad()),
        };
        if !text.is_empty() {
            out.push(Passage::new(format!("{id}#{ordinal}"), title, text));
        }
    }
    Ok(out)
}

/// `[{"title", "paragraph_text"}, ...]` as used by MuSiQue.
fn paragraph_passages(record: &Value, id: &str, at: usize) -> Result<Vec<Passage>, EvalError> {
    let bad = || EvalError::DatasetFormat(format!("item {at}: malformed field \"paragraphs\""));
    let paragraphs = field(record, &["paragraphs"], at)?
        .as_array()
        .ok_or_else(bad)?;
    let mut out = Vec::new();
    for (ordinal, p) in paragraphs.iter().enumerate() {
        let title = p.get("title").and_then(Value::as_str).unwrap_or("");
        let text = p
            .get("paragraph_text")
            .and_then(Value::as_str)
            .ok_or_else(bad)?
            .trim();
        if !text.is_empty() {
            out.push(Passage::new(format!("{id}#{ordinal}"), title, text));
        }
    }
    Ok(out)
}

pub fn parse_dataset(kind: DatasetKind, text: &str) -> Result<Vec<QAItem>, EvalError> {
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (at, record) in records(text)?.iter().enumerate() {
        let id = string_field(record, &["_id", "id"], at)?;
        let question = string_field(record, &["question"], at)?;
        let answer = string_field(record, &["answer"], at)?;
        let mut golds = vec![answer];
        let passages = match kind {
            DatasetKind::HotpotQa | DatasetKind::TwoWiki => context_passages(record, &id, at)?,
            DatasetKind::Musique => {
                if let Some(aliases) = record.get("answer_aliases").and_then(Value::as_array) {
                    for alias in aliases.iter().filter_map(Value::as_str) {
                        if !alias.trim().is_empty() && !golds.iter().any(|g| g == alias) {
                            golds.push(alias.to_string());
                        }
                    }
                }
                paragraph_passages(record, &id, at)?
            }
        };
        if !ids.insert(id.clone()) {
            return Err(EvalError::DatasetFormat(format!(
                "duplicate item id {id:?}"
            )));
        }
        items.push(QAItem {
            id,
            question,
            golds,
            passages,
        });
    }
    Ok(items)
}

pub fn load_dataset(kind: DatasetKind, path: &Path) -> Result<Vec<QAItem>, EvalError> {
    let text =
        fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    parse_dataset(kind, &text)
}

/// Every candidate passage of every item, deduplicated by (title, text).
/// The first occurrence keeps its id.
pub fn build_corpus(items: &[QAItem]) -> Vec<Passage> {
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let mut out = Vec::new();
    for item in items {
        for p in &item.passages {
            if seen.insert((p.title.as_str(), p.text.as_str())) {
                out.push(p.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub rows: Vec<EvalRow>,
}

/// Scores `items` against the matching trajectories (by id, then by
/// question text). Missing and failed trajectories score zero and are flagged.
pub fn evaluate_trajectories(trajectories: &[Trajectory], items: &[QAItem]) -> EvalSummary {
    let by_id: HashMap<&str, &Trajectory> = trajectories
        .iter()
        .filter_map(|t| t.id.as_deref().map(|id| (id, t)))
        .collect();
    let by_question: HashMap<&str, &Trajectory> = trajectories
        .iter()
        .map(|t| (t.question.as_str(), t))
        .collect();
    let rows: Vec<EvalRow> = items
        .iter()
        .map(|item| {
            let found = by_id
                .get(item.id.as_str())
                .or_else(|| by_question.get(item.question.as_str()));
            match found {
                None => EvalRow {
                    id: item.id.clone(),
                    em: 0.0,
                    f1: 0.0,
                    prediction: String::new(),
                    flag: Some("missing".into()),
                },
                Some(t) => {
                    let prediction = t.prediction().to_string();
                    EvalRow {
                        id: item.id.clone(),
                        em: f64::from(exact_match(&prediction, &item.golds)),
                        f1: f1(&prediction, &item.golds),
                        flag: t.is_failed().then(|| "failed".to_string()),
                        prediction,
                    }
                }
            }
        })
        .collect();
    let count = rows.len();
    let mean = |f: fn(&EvalRow) -> f64| {
        if count == 0 {
            0.0
        } else {
            rows.iter().map(f).sum::<f64>() / count as f64
        }
    };
    EvalSummary {
        count,
        em: mean(|r| r.em),
        f1: mean(|r| r.f1),
        rows,
    }
}

pub fn evaluate(trajectory_dir: &Path, items: &[QAItem]) -> Result<EvalSummary, EvalError> {
    let trajectories: Vec<Trajectory> = if trajectory_dir.exists() {
        read_trajectories(trajectory_dir)
            .map_err(|e| EvalError::Io(e.to_string()))?
            .into_iter()
            .map(|(_, t)| t)
            .collect()
    } else {
        Vec::new()
    };
    Ok(evaluate_trajectories(&trajectories, items))
}
