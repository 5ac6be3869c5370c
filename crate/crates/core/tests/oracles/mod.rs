//! Independent reference implementations and seeded case generators shared
//! by the oracle tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeSet;

use knowtrace_core::lmio::RawTriple;
use knowtrace_core::retrieval::Passage;
use knowtrace_core::{ExpansionPair, ExplorationOutcome, KgContext, Triplet};
use rand::seq::SliceRandom;
use rand::Rng;

const K1: f64 = 1.2;
const B: f64 = 0.75;

pub const VOCAB: &[&str] = &[
    "watt",
    "Watt",
    "steam",
    "engine",
    "glasgow",
    "birmingham",
    "riots",
    "the",
    "of",
    "in",
    "Steam-engine",
    "university,",
    "1791",
    "priestley.",
    "WATT",
];

pub fn tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Scores every passage from scratch; top `n` by score, ties by id.
pub fn bm25_brute_force(passages: &[Passage], query: &str, n: usize) -> Vec<(String, f64)> {
    let docs: Vec<Vec<String>> = passages
        .iter()
        .map(|p| {
            let mut t = tokens(&p.title);
            t.extend(tokens(&p.text));
            t
        })
        .collect();
    let d = docs.len() as f64;
    let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / d;
    let df = |term: &str| {
        docs.iter()
            .filter(|doc| doc.iter().any(|t| t == term))
            .count() as f64
    };
    let q = tokens(query);
    let mut scored: Vec<(String, f64)> = Vec::new();
    for (p, doc) in passages.iter().zip(&docs) {
        let mut score = 0.0;
        for term in &q {
            let tf = doc.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = df(term);
            let idf = ((d - df + 0.5) / (df + 0.5) + 1.0).ln();
            let norm = 1.0 - B + B * doc.len() as f64 / avg;
            score += idf * (tf * (K1 + 1.0)) / (tf + K1 * norm);
        }
        if score > 0.0 {
            scored.push((p.id.clone(), score));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(n);
    scored
}

pub fn random_words<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| *VOCAB.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Up to 50 passages with ids shuffled against insertion order.
pub fn random_corpus<R: Rng>(rng: &mut R) -> Vec<Passage> {
    let n = rng.gen_range(1..=50);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    ids.into_iter()
        .map(|k| {
            Passage::new(
                format!("p{k:02}"),
                random_words(rng, 0, 3),
                random_words(rng, 1, 20),
            )
        })
        .collect()
}

pub struct Case {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub initials: Vec<bool>,
    pub targets: Vec<bool>,
}

pub fn name(v: usize) -> String {
    format!("e{v}")
}

impl Case {
    pub fn kg(&self) -> KgContext {
        let mut kg = KgContext::new();
        for v in (0..self.nodes).filter(|&v| self.initials[v]) {
            kg.register_expansion_point(&name(v)).unwrap();
        }
        let outcome = kg.merge(
            self.edges
                .iter()
                .enumerate()
                .map(|(i, &(s, o))| Triplet::new(name(s), format!("r{i}"), name(o))),
        );
        assert_eq!(outcome.inserted, self.edges.len());
        kg
    }

    pub fn target_keys(&self) -> BTreeSet<String> {
        (0..self.nodes)
            .filter(|&v| self.targets[v])
            .map(name)
            .collect()
    }

    fn incident(&self, v: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter_map(move |(e, &(s, o))| {
                if s == v {
                    Some((e, o))
                } else if o == v {
                    Some((e, s))
                } else {
                    None
                }
            })
    }

    fn component_of(&self, start: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for (_, w) in self.incident(v) {
                if seen.insert(w) {
                    stack.push(w);
                }
            }
        }
        seen
    }

    /// Edges on some simple path between two distinct anchored nodes of a
    /// component that holds both a target and an initial entity.
    pub fn oracle(&self) -> BTreeSet<usize> {
        let touched: BTreeSet<usize> = self.edges.iter().flat_map(|&(s, o)| [s, o]).collect();
        let anchored = |v: usize| self.initials[v] || self.targets[v];
        let mut out = BTreeSet::new();
        let mut done = BTreeSet::new();
        for &start in &touched {
            if done.contains(&start) {
                continue;
            }
            let comp = self.component_of(start);
            done.extend(comp.iter().copied());
            let has_target = comp.iter().any(|&v| self.targets[v]);
            let has_initial = comp.iter().any(|&v| self.initials[v]);
            if !(has_target && has_initial) {
                continue;
            }
            let anchors: Vec<usize> = comp.iter().copied().filter(|&v| anchored(v)).collect();
            for (i, &a) in anchors.iter().enumerate() {
                for &b in &anchors[i + 1..] {
                    let mut visited = vec![false; self.nodes];
                    self.paths(a, b, &mut visited, &mut Vec::new(), &mut out);
                }
            }
        }
        out
    }

    fn paths(
        &self,
        v: usize,
        goal: usize,
        visited: &mut Vec<bool>,
        path: &mut Vec<usize>,
        out: &mut BTreeSet<usize>,
    ) {
        if v == goal {
            out.extend(path.iter().copied());
            return;
        }
        visited[v] = true;
        for (e, w) in self.incident(v).collect::<Vec<_>>() {
            if w != v && !visited[w] {
                path.push(e);
                self.paths(w, goal, visited, path, out);
                path.pop();
            }
        }
        visited[v] = false;
    }

    /// Edges whose component holds both a target and an initial entity.
    pub fn in_anchored_components(&self) -> BTreeSet<usize> {
        (0..self.edges.len())
            .filter(|&e| {
                let comp = self.component_of(self.edges[e].0);
                comp.iter().any(|&v| self.targets[v]) && comp.iter().any(|&v| self.initials[v])
            })
            .collect()
    }
}

fn random_flags<R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(p)).collect()
}

/// A forest over at most 12 entities.
pub fn acyclic_case<R: Rng>(rng: &mut R) -> Case {
    let nodes = rng.gen_range(1..=12);
    let mut edges = Vec::new();
    for v in 1..nodes {
        if rng.gen_bool(0.8) {
            let u = rng.gen_range(0..v);
            edges.push(if rng.gen_bool(0.5) { (u, v) } else { (v, u) });
        }
    }
    Case {
        nodes,
        edges,
        initials: random_flags(rng, nodes, 0.25),
        targets: random_flags(rng, nodes, 0.25),
    }
}

/// A spanning tree plus extra edges, which may be self-loops or parallel.
pub fn cyclic_case<R: Rng>(rng: &mut R) -> Case {
    let nodes = rng.gen_range(2..=8);
    let mut edges = Vec::new();
    for v in 1..nodes {
        let u = rng.gen_range(0..v);
        edges.push((u, v));
    }
    for _ in 0..rng.gen_range(1..=5) {
        edges.push((rng.gen_range(0..nodes), rng.gen_range(0..nodes)));
    }
    Case {
        nodes,
        edges,
        initials: random_flags(rng, nodes, 0.3),
        targets: random_flags(rng, nodes, 0.3),
    }
}

/// Trimmed single-line text; `extra` widens the character set.
fn random_text<R: Rng>(rng: &mut R, extra: &str, max: usize) -> String {
    let alnum = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    let inner: Vec<char> = format!("{alnum} {extra}").chars().collect();
    let edge: Vec<char> = alnum.chars().collect();
    let len = rng.gen_range(1..=max);
    let mut s: String = (0..len).map(|_| *inner.choose(rng).unwrap()).collect();
    s.insert(0, *edge.choose(rng).unwrap());
    s.push(*edge.choose(rng).unwrap());
    s
}

pub fn random_exploration<R: Rng>(rng: &mut R) -> ExplorationOutcome {
    if rng.gen_bool(0.4) {
        let lines = rng.gen_range(0..4);
        let thought = (0..lines)
            .map(|_| random_text(rng, ",.'-", 30))
            .collect::<Vec<_>>()
            .join("\n");
        ExplorationOutcome::Sufficient {
            thought,
            answer: random_text(rng, ",.:'-", 20),
        }
    } else {
        let pairs = (0..rng.gen_range(1..5))
            .map(|_| {
                let hint = if rng.gen_bool(0.1) {
                    String::new()
                } else {
                    random_text(rng, ",.:?'-", 30)
                };
                ExpansionPair::new(random_text(rng, ",.()'&-", 20), hint)
            })
            .collect();
        ExplorationOutcome::Expand { pairs }
    }
}

pub fn random_triples<R: Rng>(rng: &mut R) -> Vec<RawTriple> {
    (0..rng.gen_range(0..6))
        .map(|_| {
            RawTriple::new(
                random_text(rng, ",.;()'&-", 20),
                random_text(rng, ",.;()'&-", 20),
                random_text(rng, ",.;()'&-", 20),
            )
        })
        .collect()
}
