//! Passage corpus, Okapi BM25 index and the retriever contract.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::lmio::ExpansionPair;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("duplicate passage id {0:?}")]
    DuplicateId(String),
    #[error("passage {0:?} has empty text")]
    EmptyPassage(String),
    #[error("corpus line {line}: {message}")]
    CorpusFormat { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
    #[error("remote retriever: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }
}

/// Lowercase, split on every non-alphanumeric character, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Entity text, a space, the relation hint; trimmed.
pub fn form_query(pair: &ExpansionPair) -> String {
    format!("{} {}", pair.entity.trim(), pair.relation_hint.trim())
        .trim()
        .to_string()
}

pub trait Retriever: Send + Sync {
    /// At most `n` passages, best first.
    fn retrieve(&self, query: &str, n: usize) -> Result<Vec<Passage>, RetrievalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    ordinal: u32,
    tf: u32,
}

/// In-memory inverted index over title + text.
#[derive(Debug, Clone, Default)]
pub struct CorpusIndex {
    passages: Vec<Passage>,
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<usize>,
    avg_doc_length: f64,
}

impl CorpusIndex {
    /// Passages are stored sorted by id; ordinals refer to that order.
    pub fn build(passages: impl IntoIterator<Item = Passage>) -> Result<Self, RetrievalError> {
        let mut passages: Vec<Passage> = passages.into_iter().collect();
        passages.sort_by(|a, b| a.id.cmp(&b.id));
        for w in passages.windows(2) {
            if w[0].id == w[1].id {
                return Err(RetrievalError::DuplicateId(w[0].id.clone()));
            }
        }
        if let Some(p) = passages.iter().find(|p| p.text.trim().is_empty()) {
            return Err(RetrievalError::EmptyPassage(p.id.clone()));
        }
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(passages.len());
        for (ordinal, p) in passages.iter().enumerate() {
            let mut tokens = tokenize(&p.title);
            tokens.extend(tokenize(&p.text));
            doc_lengths.push(tokens.len());
            let mut counts: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting {
                    ordinal: ordinal as u32,
                    tf,
                });
            }
        }
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().sum::<usize>() as f64 / doc_lengths.len() as f64
        };
        Ok(Self {
            passages,
            postings,
            doc_lengths,
            avg_doc_length,
        })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn doc_lengths(&self) -> &[usize] {
        &self.doc_lengths
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_frequency(&self, term: &str, ordinal: usize) -> u32 {
        self.postings
            .get(term)
            .and_then(|ps| ps.iter().find(|p| p.ordinal as usize == ordinal))
            .map_or(0, |p| p.tf)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let d = self.passages.len() as f64;
        let df = self.document_frequency(term) as f64;
        ((d - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, ordinal: usize) -> f64 {
        let tf = f64::from(tf);
        let norm = 1.0 - BM25_B + BM25_B * self.doc_lengths[ordinal] as f64 / self.avg_doc_length;
        idf * (tf * (BM25_K1 + 1.0)) / (tf + BM25_K1 * norm)
    }

    /// BM25 of one passage (by ordinal). Each query-term occurrence
    /// contributes, in query order.
    pub fn bm25_score(&self, query_terms: &[String], ordinal: usize) -> f64 {
        let mut score = 0.0;
        for term in query_terms {
            let tf = self.term_frequency(term, ordinal);
            if tf > 0 {
                score += self.term_weight(self.idf(term), tf, ordinal);
            }
        }
        score
    }

    /// Ranked `(ordinal, score)` for every passage with a positive score.
    pub fn scores(&self, query: &str) -> Vec<(usize, f64)> {
        let terms = tokenize(query);
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for p in postings {
                let ordinal = p.ordinal as usize;
                *acc.entry(ordinal).or_insert(0.0) += self.term_weight(idf, p.tf, ordinal);
            }
        }
        let mut ranked: Vec<(usize, f64)> = acc.into_iter().filter(|(_, s)| *s > 0.0).collect();
        // Ordinals follow id order, so ordinal order is the id tie-break.
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    /// Top `n` by descending score, ties by ascending id, zero scores dropped.
    pub fn retrieve(&self, query: &str, n: usize) -> Vec<Passage> {
        self.scores(query)
            .into_iter()
            .take(n)
            .map(|(i, _)| self.passages[i].clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Retriever {
    index: CorpusIndex,
}

impl Bm25Retriever {
    pub fn new(index: CorpusIndex) -> Self {
        Self { index }
    }

    pub fn from_corpus_file(path: &Path) -> Result<Self, RetrievalError> {
        Ok(Self::new(CorpusIndex::build(read_corpus(path)?)?))
    }

    pub fn index(&self) -> &CorpusIndex {
        &self.index
    }
}

impl Retriever for Bm25Retriever {
    fn retrieve(&self, query: &str, n: usize) -> Result<Vec<Passage>, RetrievalError> {
        Ok(self.index.retrieve(query, n))
    }
}

/// POSTs `{"query", "n"}` and reads `{"passages": [...]}`.
#[derive(Debug, Clone)]
pub struct RemoteRetriever {
    url: String,
    client: reqwest::blocking::Client,
}

impl RemoteRetriever {
    pub fn new(url: impl Into<String>) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| RetrievalError::Remote(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            client,
        })
    }
}

impl Retriever for RemoteRetriever {
    fn retrieve(&self, query: &str, n: usize) -> Result<Vec<Passage>, RetrievalError> {
        let response = self
            .client
            .post(&self.url)
            .json(&json!({ "query": query, "n": n }))
            .send()
            .map_err(|e| RetrievalError::Remote(e.to_string()))?;
        if !response.status().is_success() {
            return Err(RetrievalError::Remote(format!(
                "HTTP {}",
                response.status()
            )));
        }
        let mut body: Value = response
            .json()
            .map_err(|e| RetrievalError::Remote(e.to_string()))?;
        let passages: Vec<Passage> = serde_json::from_value(body["passages"].take())
            .map_err(|e| RetrievalError::Remote(format!("bad passages field: {e}")))?;
        Ok(passages.into_iter().take(n).collect())
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<Passage>, RetrievalError> {
    let file =
        fs::File::open(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
    parse_corpus(BufReader::new(file))
}

/// One `{"id", "title", "text"}` record per line.
pub fn parse_corpus<R: BufRead>(input: R) -> Result<Vec<Passage>, RetrievalError> {
    let mut passages = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| RetrievalError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Passage = serde_json::from_str(&line).map_err(|e| RetrievalError::CorpusFormat {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(p.id.clone()) {
            return Err(RetrievalError::DuplicateId(p.id));
        }
        passages.push(p);
    }
    Ok(passages)
}

pub fn write_corpus<W: Write>(passages: &[Passage], mut out: W) -> Result<(), RetrievalError> {
    for p in passages {
        let line = serde_json::to_string(p).map_err(|e| RetrievalError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| RetrievalError::Io(e.to_string()))?;
    }
    Ok(())
}
