//! Seeded synthetic knowledge graph with typed entities, attribute-driven
//! relations and a long-tailed entity frequency profile.
//!
//! Every entity has a type and an attribute, both named in its description
//! alongside two filler words. Relations come in pairs that share a source
//! type, a target type and an attribute permutation: a fact `(h, r, t)`
//! requires `attr(t) = perm(attr(h))`, and a fact under one relation of a
//! pair is usually repeated under the other. Heads and tails are drawn from
//! Zipf-like distributions, so a few entities are frequent and most are rare.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, KnowledgeGraph};

const TYPES: [&str; 4] = ["person", "company", "city", "film"];
const ATTRIBUTES: [&str; 5] = ["northern", "southern", "eastern", "western", "central"];
const FILLERS: [&str; 24] = [
    "old", "new", "small", "large", "famous", "quiet", "modern", "ancient", "busy", "remote",
    "bright", "dark", "rich", "humble", "coastal", "inland", "early", "late", "public", "private",
    "local", "global", "young", "noble",
];

/// `(source type, target type, first label, second label)` per relation pair.
const PAIRS: [(usize, usize, &str, &str); 4] = [
    (0, 1, "works for", "employed by"),
    (1, 2, "based in", "located in"),
    (2, 3, "featured in", "filmed in"),
    (3, 0, "directed by", "produced by"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub entities_per_type: usize,
    /// Distinct facts drawn per relation pair before mirroring.
    pub facts_per_pair: usize,
    /// Chance that a fact is also stated under the other relation of its pair.
    pub mirror_prob: f64,
    /// Exponent of the rank-based sampling weights `1 / rank^s`.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            entities_per_type: 50,
            facts_per_pair: 170,
            mirror_prob: 0.8,
            zipf_exponent: 1.2,
            seed: 17,
        }
    }
}

fn zipf_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Builds the graph. Entities are registered type by type so ids are stable
/// across configs with the same `entities_per_type`.
pub fn generate(config: &ToyConfig) -> Result<KnowledgeGraph> {
    let n = config.entities_per_type;
    if n < ATTRIBUTES.len() {
        return Err(Error::Argument(format!(
            "need at least {} entities per type",
            ATTRIBUTES.len()
        )));
    }
    if !(0.0..=1.0).contains(&config.mirror_prob) || config.facts_per_pair == 0 {
        return Err(Error::Argument("bad toy graph parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut builder = GraphBuilder::new();

    // labels[type][i], attr[type][i]
    let mut labels = vec![Vec::with_capacity(n); TYPES.len()];
    let mut attrs = vec![Vec::with_capacity(n); TYPES.len()];
    for (ti, ty) in TYPES.iter().enumerate() {
        for i in 0..n {
            let label = format!("{ty}_{i:03}");
            let attr = i % ATTRIBUTES.len();
            let f1 = FILLERS[rng.random_range(0..FILLERS.len())];
            let f2 = FILLERS[rng.random_range(0..FILLERS.len())];
            builder.entity(&label);
            builder.describe(&label, &format!("{f1} {} {ty} {f2}", ATTRIBUTES[attr]));
            labels[ti].push(label);
            attrs[ti].push(attr);
        }
    }

    // Popularity: a random rank per entity within its type.
    let weights: Vec<Vec<f64>> = (0..TYPES.len())
        .map(|_| {
            let mut ranks: Vec<usize> = (1..=n).collect();
            ranks.shuffle(&mut rng);
            ranks
                .iter()
                .map(|&r| 1.0 / (r as f64).powf(config.zipf_exponent))
                .collect()
        })
        .collect();

    for &(src, dst, first, second) in &PAIRS {
        let mut perm: Vec<usize> = (0..ATTRIBUTES.len()).collect();
        perm.shuffle(&mut rng);
        let mut facts = std::collections::HashSet::new();
        let mut attempts = 0;
        while facts.len() < config.facts_per_pair {
            attempts += 1;
            if attempts > config.facts_per_pair * 100 {
                return Err(Error::Argument(
                    "facts_per_pair exceeds the distinct facts available".into(),
                ));
            }
            let h = zipf_pick(&mut rng, &weights[src]);
            let want = perm[attrs[src][h]];
            let cands: Vec<usize> = (0..n).filter(|&j| attrs[dst][j] == want).collect();
            let cw: Vec<f64> = cands.iter().map(|&j| weights[dst][j]).collect();
            let t = cands[zipf_pick(&mut rng, &cw)];
            if !facts.insert((h, t)) {
                continue;
            }
            let (a, b) = if rng.random_bool(0.5) {
                (first, second)
            } else {
                (second, first)
            };
            builder.add_triple(&labels[src][h], a, &labels[dst][t]);
            if rng.random_bool(config.mirror_prob) {
                builder.add_triple(&labels[src][h], b, &labels[dst][t]);
            }
        }
    }
    builder.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_graph_shape() {
        let g = generate(&ToyConfig::default()).unwrap();
        assert_eq!(g.num_entities(), 200);
        assert_eq!(g.num_relations(), 8);
        let n = g.triples().len();
        assert!((1100..=1300).contains(&n), "{n} triples");
        assert_eq!(g.described_count(), 200);
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&ToyConfig::default()).unwrap();
        let b = generate(&ToyConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate(&ToyConfig {
            seed: 3,
            ..ToyConfig::default()
        })
        .unwrap();
        assert_ne!(a.triples(), c.triples());
    }

    #[test]
    fn facts_respect_attribute_rule() {
        let g = generate(&ToyConfig::default()).unwrap();
        let attr = |e| {
            let d = g.description(e);
            ATTRIBUTES.iter().position(|a| d.contains(a)).unwrap()
        };
        // each relation maps a head attribute to a single tail attribute
        let mut map = std::collections::HashMap::new();
        for t in g.triples() {
            let prev = map.insert((t.relation, attr(t.head)), attr(t.tail));
            assert!(prev.is_none_or(|p| p == attr(t.tail)));
        }
    }

    #[test]
    fn frequencies_are_long_tailed() {
        let g = generate(&ToyConfig::default()).unwrap();
        let mut counts = vec![0usize; g.num_entities()];
        for t in g.triples() {
            counts[t.head.index()] += 1;
            counts[t.tail.index()] += 1;
        }
        let rare = counts.iter().filter(|&&c| c < 5).count();
        let max = *counts.iter().max().unwrap();
        assert!(rare >= 25, "{rare} rare entities");
        assert!(max >= 30, "max frequency {max}");
    }
}
