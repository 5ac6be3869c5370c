//! Seeded synthetic workloads for the benchmarks.

use std::collections::BTreeSet;

use knowtrace_core::retrieval::Passage;
use knowtrace_core::{KgContext, Triplet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Zipf-ish vocabulary: low indices are drawn far more often.
fn word<R: Rng>(rng: &mut R, vocab: usize) -> String {
    let u: f64 = rng.gen();
    let k = ((vocab as f64).powf(u) - 1.0) as usize;
    format!("w{}", k.min(vocab - 1))
}

fn sentence<R: Rng>(rng: &mut R, vocab: usize, len: usize) -> String {
    (0..len)
        .map(|_| word(rng, vocab))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `docs` passages of 40-120 tokens over a `vocab`-word vocabulary.
pub fn synthetic_corpus(docs: usize, vocab: usize, seed: u64) -> Vec<Passage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs)
        .map(|i| {
            let len = rng.gen_range(40..=120);
            Passage::new(
                format!("d{i}"),
                sentence(&mut rng, vocab, 4),
                sentence(&mut rng, vocab, len),
            )
        })
        .collect()
}

/// Queries of 3-8 tokens drawn from the same distribution as the corpus.
pub fn synthetic_queries(count: usize, vocab: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let len = rng.gen_range(3..=8);
            sentence(&mut rng, vocab, len)
        })
        .collect()
}

/// A random graph of `edges` triplets over `nodes` entities, with a few
/// expansion points and target entities.
pub fn synthetic_kg(nodes: usize, edges: usize, seed: u64) -> (KgContext, BTreeSet<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = |v: usize| format!("e{v}");
    let mut kg = KgContext::new();
    let mut ids: Vec<usize> = (0..nodes).collect();
    ids.shuffle(&mut rng);
    let anchors = (nodes / 20).max(1);
    for &v in &ids[..anchors] {
        kg.register_expansion_point(&name(v))
            .expect("non-empty entity");
    }
    kg.merge((0..edges).map(|i| {
        let s = rng.gen_range(0..nodes);
        let o = rng.gen_range(0..nodes);
        Triplet::new(name(s), format!("r{i}"), name(o))
    }));
    let targets = ids[anchors..anchors + (nodes / 20).max(1)]
        .iter()
        .map(|&v| name(v))
        .collect();
    (kg, targets)
}
