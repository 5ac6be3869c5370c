//! Reflective backtracing over a finished trajectory.
//!
//! Starting from the entities mentioned in the final thought and answer, the
//! supporting subgraph is the part of the knowledge graph that connects them
//! back to the entities the run started exploring from. Exploration pairs
//! and completion triplets that contributed nothing to it are filtered out of
//! the training targets.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{IterationRecord, PairRecord, Trajectory};
use crate::kg::{normalize_entity, KgContext, RenderStrategy, Triplet, TripletKey};
use crate::lmio::{
    build_exploration_prompt, exploration_items, parse_completion_lines, render_completion,
    render_exploration, CompletionLine, ExpansionPair, ExplorationOutcome, RawTriple, Templates,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BacktraceError {
    #[error("trajectory has no final answer to trace back from")]
    NoAnswer,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSubgraph {
    pub triplet_indices: BTreeSet<usize>,
    pub target_entities: BTreeSet<String>,
    /// Initial entities touched by a surviving triplet.
    pub anchored_initials: BTreeSet<String>,
}

impl SupportSubgraph {
    pub fn keys(&self, kg: &KgContext) -> HashSet<TripletKey> {
        self.triplet_indices
            .iter()
            .map(|&i| kg.key_of(i).clone())
            .collect()
    }

    pub fn triplets<'a>(&'a self, kg: &'a KgContext) -> impl Iterator<Item = &'a Triplet> + 'a {
        self.triplet_indices.iter().map(|&i| &kg.triplets()[i])
    }
}

fn is_boundary(c: Option<char>) -> bool {
    c.is_none_or(|c| !c.is_alphanumeric())
}

/// KG entities whose normalized surface occurs in the normalized final
/// thought + answer, delimited by non-alphanumerics or the text edges.
pub fn extract_target_entities(kg: &KgContext, thought: &str, answer: &str) -> BTreeSet<String> {
    let Ok(text) = normalize_entity(&format!("{thought} {answer}")) else {
        return BTreeSet::new();
    };
    kg.entity_index()
        .keys()
        .filter(|key| {
            text.match_indices(key.as_str()).any(|(start, m)| {
                let before = text[..start].chars().next_back();
                let after = text[start + m.len()..].chars().next();
                is_boundary(before) && is_boundary(after)
            })
        })
        .cloned()
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Groups `edges` (indices into `ends`) by connected component.
fn components(node_count: usize, ends: &[(usize, usize)], edges: &[usize]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(node_count);
    for &e in edges {
        uf.union(ends[e].0, ends[e].1);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &e in edges {
        groups.entry(uf.find(ends[e].0)).or_default().push(e);
    }
    groups.into_values().collect()
}

/// Traces from `targets` back to the initial entities over the undirected
/// triplet structure:
///
/// 1. keep the connected components that contain a target;
/// 2. repeatedly delete edges hanging off a degree-1 node that is neither a
///    target nor an initial entity;
/// 3. drop what is left of any component without an initial entity.
///
/// Cycles survive step 2 whole.
pub fn support_subgraph(kg: &KgContext, targets: &BTreeSet<String>) -> SupportSubgraph {
    let mut node_ids: BTreeMap<&str, usize> = BTreeMap::new();
    let mut names: Vec<&str> = Vec::new();
    let mut ends = Vec::with_capacity(kg.len());
    for key in kg.keys() {
        let mut pair = [0usize; 2];
        for (slot, name) in pair.iter_mut().zip([key.0.as_str(), key.2.as_str()]) {
            *slot = *node_ids.entry(name).or_insert_with(|| {
                names.push(name);
                names.len() - 1
            });
        }
        ends.push((pair[0], pair[1]));
    }
    let n = names.len();
    let is_target: Vec<bool> = names.iter().map(|k| targets.contains(*k)).collect();
    let is_initial: Vec<bool> = names
        .iter()
        .map(|k| kg.initial_entities().contains(*k))
        .collect();
    let anchored: Vec<bool> = (0..n).map(|i| is_target[i] || is_initial[i]).collect();

    let all: Vec<usize> = (0..ends.len()).collect();
    let mut alive = vec![false; ends.len()];
    for comp in components(n, &ends, &all) {
        if comp
            .iter()
            .any(|&e| is_target[ends[e].0] || is_target[ends[e].1])
        {
            for e in comp {
                alive[e] = true;
            }
        }
    }

    let mut degree = vec![0usize; n];
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(s, o)) in ends.iter().enumerate() {
        if !alive[e] {
            continue;
        }
        degree[s] += 1;
        degree[o] += 1;
        incident[s].push(e);
        if o != s {
            incident[o].push(e);
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| degree[v] == 1 && !anchored[v]).collect();
    while let Some(v) = queue.pop_front() {
        if degree[v] != 1 {
            continue;
        }
        let Some(&e) = incident[v].iter().find(|&&e| alive[e]) else {
            continue;
        };
        alive[e] = false;
        let (s, o) = ends[e];
        degree[s] -= 1;
        degree[o] -= 1;
        let other = if s == v { o } else { s };
        if degree[other] == 1 && !anchored[other] {
            queue.push_back(other);
        }
    }

    let surviving: Vec<usize> = (0..ends.len()).filter(|&e| alive[e]).collect();
    let mut support = SupportSubgraph {
        target_entities: targets.clone(),
        ..SupportSubgraph::default()
    };
    for comp in components(n, &ends, &surviving) {
        let has_initial = comp
            .iter()
            .any(|&e| is_initial[ends[e].0] || is_initial[ends[e].1]);
        if !has_initial {
            continue;
        }
        for e in comp {
            support.triplet_indices.insert(e);
            for v in [ends[e].0, ends[e].1] {
                if is_initial[v] {
                    support.anchored_initials.insert(names[v].to_string());
                }
            }
        }
    }
    support
}

/// Runs target extraction and subgraph tracing on a trajectory.
pub fn trace(trajectory: &Trajectory) -> Result<SupportSubgraph, BacktraceError> {
    let (thought, answer) = trajectory
        .thought_and_answer()
        .ok_or(BacktraceError::NoAnswer)?;
    let targets = extract_target_entities(&trajectory.kg, thought, answer);
    Ok(support_subgraph(&trajectory.kg, &targets))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExplorationFilter {
    /// A sufficient (answering) exploration, kept as is.
    KeepSufficient,
    Expand {
        kept: Vec<ExpansionPair>,
        /// 1-based positions of the removed pairs.
        removed: Vec<usize>,
    },
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompletionFilter {
    Keep(Vec<RawTriple>),
    Drop,
}

fn raw_key(t: &RawTriple) -> Option<TripletKey> {
    Triplet::new(&t.subject, &t.relation, &t.object).key().ok()
}

fn supports(record: &PairRecord, support: &HashSet<TripletKey>) -> bool {
    record
        .completion_triplets
        .iter()
        .filter_map(|t| t.key().ok())
        .any(|k| support.contains(&k))
}

/// Keeps a pair iff its completion contributed at least one supporting
/// triplet; drops the record when no pair survives.
pub fn filter_exploration(
    record: &IterationRecord,
    support: &HashSet<TripletKey>,
) -> ExplorationFilter {
    let pairs = match &record.outcome {
        ExplorationOutcome::Sufficient { .. } => return ExplorationFilter::KeepSufficient,
        ExplorationOutcome::Expand { pairs } => pairs,
    };
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let position = i + 1;
        let useful = record
            .pair_records
            .iter()
            .find(|r| r.pair_index == position)
            .is_some_and(|r| supports(r, support));
        if useful {
            kept.push(pair.clone());
        } else {
            removed.push(position);
        }
    }
    if kept.is_empty() {
        ExplorationFilter::Drop
    } else {
        ExplorationFilter::Expand { kept, removed }
    }
}

/// The recorded triplets that lie in the supporting subgraph.
pub fn filter_completion(record: &PairRecord, support: &HashSet<TripletKey>) -> CompletionFilter {
    let kept: Vec<RawTriple> = record
        .completion_triplets
        .iter()
        .filter(|t| t.key().is_ok_and(|k| support.contains(&k)))
        .map(|t| RawTriple::new(&t.subject, &t.relation, &t.object))
        .collect();
    if kept.is_empty() {
        CompletionFilter::Drop
    } else {
        CompletionFilter::Keep(kept)
    }
}

/// Counts tokens for the filtered-to-all ratio.
pub type TokenCounter = dyn Fn(&str) -> usize;

pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenTally {
    pub filtered: usize,
    pub all: usize,
}

impl TokenTally {
    pub fn ratio(&self) -> f64 {
        if self.all == 0 {
            0.0
        } else {
            self.filtered as f64 / self.all as f64
        }
    }
}

/// Filtered and total output tokens over every accepted exploration and
/// completion generation. Filtered spans are removed pair lines, removed
/// triplet lines, and the whole text of dropped records.
pub fn fa_tally(
    trajectory: &Trajectory,
    support: &SupportSubgraph,
    count: &TokenCounter,
) -> TokenTally {
    let keys = support.keys(&trajectory.kg);
    let mut tally = TokenTally::default();
    for it in &trajectory.iterations {
        tally.all += count(&it.exploration_raw);
        match filter_exploration(it, &keys) {
            ExplorationFilter::KeepSufficient => {}
            ExplorationFilter::Drop => tally.filtered += count(&it.exploration_raw),
            ExplorationFilter::Expand { removed, .. } => {
                for (i, (line, _)) in exploration_items(&it.exploration_raw).iter().enumerate() {
                    if removed.contains(&(i + 1)) {
                        tally.filtered += count(line);
                    }
                }
            }
        }
        for pr in &it.pair_records {
            tally.all += count(&pr.completion_raw);
            match filter_completion(pr, &keys) {
                CompletionFilter::Drop => tally.filtered += count(&pr.completion_raw),
                CompletionFilter::Keep(_) => {
                    for (line, parsed) in parse_completion_lines(&pr.completion_raw) {
                        if let CompletionLine::Triple(t) = parsed {
                            if !raw_key(&t).is_some_and(|k| keys.contains(&k)) {
                                tally.filtered += count(line);
                            }
                        }
                    }
                }
            }
        }
    }
    tally
}

/// Filtered-to-all ratio with whitespace tokenization.
pub fn fa_ratio(trajectory: &Trajectory, support: &SupportSubgraph) -> f64 {
    fa_tally(trajectory, support, &whitespace_tokens).ratio()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Exploration,
    Completion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub question: String,
    pub iteration: usize,
    pub pair: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionExample {
    pub kind: ExampleKind,
    pub prompt: String,
    pub target: String,
    pub origin: Origin,
}

/// Which exploration prompt a training example carries.
#[derive(Debug, Clone, Copy)]
pub enum PromptMode<'a> {
    /// The prompt the model actually saw.
    Verbatim,
    /// Rebuilt from only the supporting triplets acquired before the
    /// iteration. The texts strategy falls back to triplets here.
    Rerender {
        templates: &'a Templates,
        strategy: RenderStrategy,
    },
}

fn rerendered_prompt(
    trajectory: &Trajectory,
    support: &SupportSubgraph,
    it: &IterationRecord,
    templates: &Templates,
    strategy: RenderStrategy,
) -> String {
    let before: BTreeSet<usize> = support
        .triplet_indices
        .iter()
        .copied()
        .filter(|&i| {
            trajectory.kg.triplets()[i]
                .provenance
                .as_ref()
                .is_none_or(|p| p.iteration < it.index)
        })
        .collect();
    let filtered = trajectory.kg.restricted_to(&before);
    let knowledge = match strategy {
        RenderStrategy::Paths => filtered.render_paths(),
        _ => filtered.render_triplets(),
    };
    let mut prompt =
        build_exploration_prompt(&templates.exploration, &trajectory.question, &knowledge)
            .unwrap_or_else(|_| it.exploration_prompt.clone());
    if it.forced {
        prompt.push_str("\n\n");
        prompt.push_str(crate::engine::FORCE_ANSWER_SUFFIX);
    }
    prompt
}

/// One exploration example per kept record and one completion example per
/// kept pair, in trajectory order.
pub fn synthesize_supervision(
    trajectory: &Trajectory,
    support: &SupportSubgraph,
    mode: PromptMode<'_>,
) -> Vec<SupervisionExample> {
    let keys = support.keys(&trajectory.kg);
    let question = trajectory
        .id
        .clone()
        .unwrap_or_else(|| trajectory.question.clone());
    let mut out = Vec::new();
    for it in &trajectory.iterations {
        let target = match filter_exploration(it, &keys) {
            ExplorationFilter::Drop => continue,
            ExplorationFilter::KeepSufficient => render_exploration(&it.outcome),
            ExplorationFilter::Expand { kept, .. } => {
                render_exploration(&ExplorationOutcome::Expand { pairs: kept })
            }
        };
        let prompt = match mode {
            PromptMode::Verbatim => it.exploration_prompt.clone(),
            PromptMode::Rerender {
                templates,
                strategy,
            } => rerendered_prompt(trajectory, support, it, templates, strategy),
        };
        out.push(SupervisionExample {
            kind: ExampleKind::Exploration,
            prompt,
            target,
            origin: Origin {
                question: question.clone(),
                iteration: it.index,
                pair: None,
            },
        });
        for pr in &it.pair_records {
            if let CompletionFilter::Keep(kept) = filter_completion(pr, &keys) {
                out.push(SupervisionExample {
                    kind: ExampleKind::Completion,
                    prompt: pr.completion_prompt.clone(),
                    target: render_completion(&kept),
                    origin: Origin {
                        question: question.clone(),
                        iteration: it.index,
                        pair: Some(pr.pair_index),
                    },
                });
            }
        }
    }
    out
}

/// Everything backtracing derives from one positive trajectory.
#[derive(Debug, Clone)]
pub struct BacktraceReport {
    pub support: SupportSubgraph,
    pub examples: Vec<SupervisionExample>,
    pub tokens: TokenTally,
}

impl BacktraceReport {
    pub fn fa_ratio(&self) -> f64 {
        self.tokens.ratio()
    }
}

pub fn backtrace(
    trajectory: &Trajectory,
    mode: PromptMode<'_>,
) -> Result<BacktraceReport, BacktraceError> {
    let support = trace(trajectory)?;
    let examples = synthesize_supervision(trajectory, &support, mode);
    let tokens = fa_tally(trajectory, &support, &whitespace_tokens);
    Ok(BacktraceReport {
        support,
        examples,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg(edges: &[(&str, &str)], initials: &[&str]) -> KgContext {
        let mut kg = KgContext::new();
        for e in initials {
            kg.register_expansion_point(e).unwrap();
        }
        kg.merge(edges.iter().map(|(s, o)| Triplet::new(*s, "r", *o)));
        kg
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn targets_respect_word_boundaries() {
        let g = kg(&[("art", "mozart")], &[]);
        assert_eq!(
            extract_target_entities(&g, "Mozart composed", "x"),
            set(&["mozart"])
        );
        let g = kg(&[("Alpha", "Beta")], &[]);
        assert!(extract_target_entities(&g, "nothing here", "none").is_empty());
        assert!(extract_target_entities(&KgContext::new(), "a", "b").is_empty());
    }

    #[test]
    fn direct_hop_is_kept() {
        let g = kg(&[("i", "t")], &["i"]);
        let s = support_subgraph(&g, &set(&["t"]));
        assert_eq!(s.triplet_indices, BTreeSet::from([0]));
        assert_eq!(s.anchored_initials, set(&["i"]));
    }

    #[test]
    fn dangling_edge_is_pruned() {
        // i -> a -> t plus a -> x with x unanchored.
        let g = kg(&[("i", "a"), ("a", "t"), ("a", "x")], &["i"]);
        let s = support_subgraph(&g, &set(&["t"]));
        assert_eq!(s.triplet_indices, BTreeSet::from([0, 1]));
    }

    #[test]
    fn component_without_initial_is_dropped() {
        let g = kg(&[("a", "t")], &[]);
        assert!(support_subgraph(&g, &set(&["t", "a"]))
            .triplet_indices
            .is_empty());
    }

    #[test]
    fn component_without_target_is_dropped() {
        let g = kg(&[("i", "a"), ("j", "t")], &["i", "j"]);
        let s = support_subgraph(&g, &set(&["t"]));
        assert_eq!(s.triplet_indices, BTreeSet::from([1]));
    }

    #[test]
    fn cycles_survive() {
        // i - t plus a triangle t, u, v hanging off t.
        let g = kg(&[("i", "t"), ("t", "u"), ("u", "v"), ("v", "t")], &["i"]);
        let s = support_subgraph(&g, &set(&["t"]));
        assert_eq!(s.triplet_indices.len(), 4);
    }

    #[test]
    fn self_loop_counts_twice() {
        let g = kg(&[("i", "t"), ("x", "x")], &["i"]);
        let s = support_subgraph(&g, &set(&["t"]));
        assert_eq!(s.triplet_indices, BTreeSet::from([0]));
    }

    #[test]
    fn empty_tally_ratio_is_zero() {
        assert_eq!(TokenTally::default().ratio(), 0.0);
        assert_eq!(
            TokenTally {
                filtered: 1,
                all: 4
            }
            .ratio(),
            0.25
        );
    }
}
