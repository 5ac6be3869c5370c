//! Question-specific knowledge graph context.
//!
//! A [`KgContext`] is the graph that grows while a question is being
//! answered: an insertion-ordered list of triplets, an index from normalized
//! entity keys to their first-seen surface form and incident triplets, and
//! the set of entities that were introduced as expansion points before the
//! graph knew anything about them (the "initial" entities).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KgError {
    #[error("entity is empty after trimming")]
    InvalidEntity,
    #[error("malformed triplet ({subject:?}, {relation:?}, {object:?}): {reason}")]
    MalformedTriplet {
        subject: String,
        relation: String,
        object: String,
        reason: &'static str,
    },
    #[error("the texts strategy needs a rewrite backend")]
    MissingRewriteBackend,
    #[error("knowledge rewrite failed: {0}")]
    Rewrite(String),
    #[error("kg file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("kg io: {0}")]
    Io(String),
}

/// Lowercases, trims and collapses internal whitespace runs.
pub fn normalize_entity(raw: &str) -> Result<String, KgError> {
    let key = raw
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    if key.is_empty() {
        return Err(KgError::InvalidEntity);
    }
    Ok(key)
}

/// Where a triplet came from: the iteration and expansion pair whose
/// completion produced it, and the passages the completion was shown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletProvenance {
    pub iteration: usize,
    pub pair_index: usize,
    pub source_pair: (String, String),
    pub passage_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    #[serde(default)]
    pub provenance: Option<TripletProvenance>,
}

/// Normalized `(subject, relation, object)` identity of a triplet.
pub type TripletKey = (String, String, String);

impl Triplet {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            provenance: None,
        }
    }

    pub fn with_provenance(mut self, provenance: TripletProvenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    /// Checks the field invariants. The pipe character and line breaks are
    /// reserved by the rendered `(s | r | o)` form.
    pub fn validate(&self) -> Result<(), KgError> {
        let malformed = |reason| KgError::MalformedTriplet {
            subject: self.subject.clone(),
            relation: self.relation.clone(),
            object: self.object.clone(),
            reason,
        };
        for field in [&self.subject, &self.relation, &self.object] {
            if field.trim().is_empty() {
                return Err(malformed("empty field"));
            }
            if field.contains('|') || field.contains('\n') || field.contains('\r') {
                return Err(malformed("field contains a reserved character"));
            }
        }
        Ok(())
    }

    pub fn key(&self) -> Result<TripletKey, KgError> {
        self.validate()?;
        Ok((
            normalize_entity(&self.subject)?,
            normalize_relation(&self.relation),
            normalize_entity(&self.object)?,
        ))
    }
}

fn normalize_relation(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityEntry {
    /// First-seen surface form.
    pub surface: String,
    pub triplets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderStrategy {
    Triplets,
    Paths,
    Texts,
}

impl std::str::FromStr for RenderStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "triplets" => Ok(Self::Triplets),
            "paths" => Ok(Self::Paths),
            "texts" => Ok(Self::Texts),
            other => Err(format!(
                "unknown strategy {other:?} (triplets, paths, texts)"
            )),
        }
    }
}

/// Instruction prepended to the triplet listing when the texts strategy asks
/// the backend to rewrite the graph as prose.
pub const REWRITE_INSTRUCTION: &str = "Rewrite the following knowledge triplets as a short, \
factual paragraph. Keep every fact and add nothing.\n\nTriplets:\n";

#[derive(Debug, Clone, Default)]
pub struct MergeOutcome {
    pub inserted: usize,
    pub malformed: Vec<KgError>,
}

/// One chain produced by [`KgContext::assemble_paths`]: `entities.len() ==
/// relations.len() + 1` and `triplets` holds the indices it consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub triplets: Vec<usize>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgContext {
    triplets: Vec<Triplet>,
    entity_index: BTreeMap<String, EntityEntry>,
    initial_entities: BTreeSet<String>,
    #[serde(skip)]
    keys: Vec<TripletKey>,
}

impl KgContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn entity_index(&self) -> &BTreeMap<String, EntityEntry> {
        &self.entity_index
    }

    pub fn initial_entities(&self) -> &BTreeSet<String> {
        &self.initial_entities
    }

    /// Normalized key of the triplet at `index`.
    pub fn key_of(&self, index: usize) -> &TripletKey {
        &self.keys[index]
    }

    pub fn keys(&self) -> &[TripletKey] {
        &self.keys
    }

    pub fn contains_key(&self, key: &TripletKey) -> bool {
        self.keys.iter().any(|k| k == key)
    }

    pub fn surface(&self, key: &str) -> Option<&str> {
        self.entity_index.get(key).map(|e| e.surface.as_str())
    }

    /// Inserts every new triplet in order. Duplicates (by normalized key) are
    /// skipped silently; malformed triplets are skipped and reported.
    pub fn merge<I>(&mut self, new_triplets: I) -> MergeOutcome
    where
        I: IntoIterator<Item = Triplet>,
    {
        let mut seen: HashSet<TripletKey> = self.keys.iter().cloned().collect();
        let mut outcome = MergeOutcome::default();
        for triplet in new_triplets {
            let key = match triplet.key() {
                Ok(key) => key,
                Err(err) => {
                    outcome.malformed.push(err);
                    continue;
                }
            };
            if !seen.insert(key.clone()) {
                continue;
            }
            let index = self.triplets.len();
            for (entity_key, surface) in [(&key.0, &triplet.subject), (&key.2, &triplet.object)] {
                let entry = self
                    .entity_index
                    .entry(entity_key.clone())
                    .or_insert_with(|| EntityEntry {
                        surface: surface.split_whitespace().collect::<Vec<_>>().join(" "),
                        triplets: Vec::new(),
                    });
                if entry.triplets.last() != Some(&index) {
                    entry.triplets.push(index);
                }
            }
            self.triplets.push(triplet);
            self.keys.push(key);
            outcome.inserted += 1;
        }
        outcome
    }

    /// Records `entity` as an initial entity iff the graph does not know it
    /// yet. Returns whether it was recorded.
    pub fn register_expansion_point(&mut self, entity: &str) -> Result<bool, KgError> {
        let key = normalize_entity(entity)?;
        if self.entity_index.contains_key(&key) || self.initial_entities.contains(&key) {
            return Ok(false);
        }
        self.initial_entities.insert(key);
        Ok(true)
    }

    fn canonical<'a>(&'a self, key: &str, fallback: &'a str) -> &'a str {
        self.surface(key).unwrap_or(fallback)
    }

    fn triplet_line(&self, index: usize) -> String {
        let t = &self.triplets[index];
        let k = &self.keys[index];
        format!(
            "({} | {} | {})",
            self.canonical(&k.0, &t.subject),
            t.relation.trim(),
            self.canonical(&k.2, &t.object)
        )
    }

    /// One `(subject | relation | object)` line per triplet, or `None`.
    pub fn render_triplets(&self) -> String {
        if self.triplets.is_empty() {
            return "None".to_string();
        }
        (0..self.triplets.len())
            .map(|i| self.triplet_line(i))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Multi-edge chains first as `a --r--> b --s--> c`, then every
    /// single-edge chain in triplet form.
    pub fn render_paths(&self) -> String {
        if self.triplets.is_empty() {
            return "None".to_string();
        }
        let chains = self.assemble_paths();
        let mut out = Vec::with_capacity(chains.len());
        for chain in chains.iter().filter(|c| c.len() > 1) {
            let mut line = String::new();
            for (i, entity) in chain.entities.iter().enumerate() {
                if i > 0 {
                    let _ = write!(line, " --{}--> ", chain.relations[i - 1]);
                }
                line.push_str(entity);
            }
            out.push(line);
        }
        for chain in chains.iter().filter(|c| c.len() == 1) {
            out.push(self.triplet_line(chain.triplets[0]));
        }
        out.join("\n")
    }

    pub fn render<F>(&self, strategy: RenderStrategy, rewrite: Option<F>) -> Result<String, KgError>
    where
        F: FnOnce(&str) -> Result<String, String>,
    {
        match strategy {
            RenderStrategy::Triplets => Ok(self.render_triplets()),
            RenderStrategy::Paths => Ok(self.render_paths()),
            RenderStrategy::Texts => {
                let rewrite = rewrite.ok_or(KgError::MissingRewriteBackend)?;
                let prompt = format!("{REWRITE_INSTRUCTION}{}", self.render_triplets());
                rewrite(&prompt).map_err(KgError::Rewrite)
            }
        }
    }

    /// Greedy chaining in insertion order. A chain is extended while exactly
    /// one unused triplet starts at its tail entity.
    pub fn assemble_paths(&self) -> Vec<Chain> {
        let mut by_subject: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, k) in self.keys.iter().enumerate() {
            by_subject.entry(k.0.as_str()).or_default().push(i);
        }
        let mut used = vec![false; self.triplets.len()];
        let mut chains = Vec::new();
        for start in 0..self.triplets.len() {
            if used[start] {
                continue;
            }
            used[start] = true;
            let mut chain = Chain {
                entities: vec![
                    self.canonical(&self.keys[start].0, &self.triplets[start].subject)
                        .to_string(),
                    self.canonical(&self.keys[start].2, &self.triplets[start].object)
                        .to_string(),
                ],
                relations: vec![self.triplets[start].relation.trim().to_string()],
                triplets: vec![start],
            };
            let mut tail = self.keys[start].2.as_str();
            loop {
                let candidates: Vec<usize> = by_subject
                    .get(tail)
                    .map(|v| v.iter().copied().filter(|&i| !used[i]).collect())
                    .unwrap_or_default();
                let [next] = candidates[..] else { break };
                used[next] = true;
                chain
                    .relations
                    .push(self.triplets[next].relation.trim().to_string());
                chain.entities.push(
                    self.canonical(&self.keys[next].2, &self.triplets[next].object)
                        .to_string(),
                );
                chain.triplets.push(next);
                tail = self.keys[next].2.as_str();
            }
            chains.push(chain);
        }
        chains
    }

    /// Subgraph holding only the triplets at `indices` (in graph order). The
    /// initial entity set is carried over unchanged.
    pub fn restricted_to(&self, indices: &BTreeSet<usize>) -> KgContext {
        let mut out = KgContext::new();
        out.merge(indices.iter().map(|&i| self.triplets[i].clone()));
        out.initial_entities = self.initial_entities.clone();
        out
    }

    /// Rebuilds derived state after deserialization.
    pub fn reindex(&mut self) {
        let triplets = std::mem::take(&mut self.triplets);
        let initial = std::mem::take(&mut self.initial_entities);
        *self = KgContext::new();
        self.merge(triplets);
        self.initial_entities = initial;
    }

    /// Writes one JSON record per triplet.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), KgError> {
        for t in &self.triplets {
            let line = serde_json::to_string(t).map_err(|e| KgError::Io(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| KgError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<KgContext, KgError> {
        let mut triplets = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| KgError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Triplet = serde_json::from_str(&line).map_err(|e| KgError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
            triplets.push(t);
        }
        let mut kg = KgContext::new();
        let outcome = kg.merge(triplets);
        if let Some(err) = outcome.malformed.into_iter().next() {
            return Err(err);
        }
        Ok(kg)
    }
}

/// Deserializes a graph and restores its derived index.
pub fn kg_from_value(value: serde_json::Value) -> Result<KgContext, serde_json::Error> {
    let mut kg: KgContext = serde_json::from_value(value)?;
    kg.reindex();
    Ok(kg)
}
