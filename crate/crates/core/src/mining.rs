//! Zero-shot change mining: positives drawn from the vocabulary.
//!
//! A vocabulary word is a candidate positive only when its exemplar is at
//! least `min_neg_distance` bits from every negative exemplar. Distances are
//! always measured between exemplars, never raw features.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocabulary::{Vocabulary, WordId};

pub const DEFAULT_MIN_NEG_DISTANCE: u32 = 10;
pub const DEFAULT_MAX_EXAMPLES: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningStrategy {
    Uniform,
    Farthest,
    Nearest,
}

impl FromStr for MiningStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(MiningStrategy::Uniform),
            "farthest" => Ok(MiningStrategy::Farthest),
            "nearest" => Ok(MiningStrategy::Nearest),
            other => Err(Error::Config(format!("unknown mining strategy '{other}'"))),
        }
    }
}

impl fmt::Display for MiningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiningStrategy::Uniform => "uniform",
            MiningStrategy::Farthest => "farthest",
            MiningStrategy::Nearest => "nearest",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub strategy: MiningStrategy,
    pub min_neg_distance: u32,
    pub max_examples: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            strategy: MiningStrategy::Uniform,
            min_neg_distance: DEFAULT_MIN_NEG_DISTANCE,
            max_examples: DEFAULT_MAX_EXAMPLES,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self, descriptor_bits: u32) -> Result<()> {
        if self.min_neg_distance > descriptor_bits {
            return Err(Error::Config(format!(
                "min_neg_distance {} exceeds descriptor width {descriptor_bits}",
                self.min_neg_distance
            )));
        }
        if self.max_examples == 0 {
            return Err(Error::Config("max_examples must be at least 1".into()));
        }
        Ok(())
    }
}

fn distinct(negatives: &[WordId]) -> Vec<WordId> {
    let mut n = negatives.to_vec();
    n.sort_unstable();
    n.dedup();
    n
}

/// Minimum exemplar distance from `id` to any negative; `u32::MAX` when
/// there are no negatives.
pub fn min_distance(v: &Vocabulary, id: WordId, negatives: &[WordId]) -> u32 {
    negatives.iter().map(|&n| v.word_distance(id, n)).min().unwrap_or(u32::MAX)
}

fn far_enough(v: &Vocabulary, id: WordId, negatives: &[WordId], threshold: u32) -> bool {
    negatives.iter().all(|&n| v.word_distance(id, n) >= threshold)
}

/// All word ids whose exemplar is `>= min_neg_distance` bits from every
/// negative, ascending.
pub fn filter_candidates(v: &Vocabulary, negatives: &[WordId], min_neg_distance: u32) -> Vec<WordId> {
    let negs = distinct(negatives);
    (0..v.len() as WordId)
        .filter(|&id| far_enough(v, id, &negs, min_neg_distance))
        .collect()
}

/// Forward Fisher-Yates over `0..n`; element `i` is final after step `i`,
/// so consumers may stop early and still see the full-shuffle prefix.
struct LazyPermutation {
    ids: Vec<WordId>,
    next: usize,
    rng: ChaCha8Rng,
}

impl LazyPermutation {
    fn new(n: usize, seed: u64) -> Self {
        LazyPermutation {
            ids: (0..n as WordId).collect(),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Iterator for LazyPermutation {
    type Item = WordId;
    fn next(&mut self) -> Option<WordId> {
        let i = self.next;
        if i >= self.ids.len() {
            return None;
        }
        let j = self.rng.gen_range(i..self.ids.len());
        self.ids.swap(i, j);
        self.next += 1;
        Some(self.ids[i])
    }
}

/// Selects positives from a precomputed candidate list.
///
/// `uniform` takes candidates in the order of a seeded permutation of the
/// whole vocabulary id space; `farthest` / `nearest` sort by distance to the
/// nearest negative (ties by id).
pub fn mine(v: &Vocabulary, candidates: &[WordId], negatives: &[WordId], cfg: &MiningConfig) -> Vec<WordId> {
    if candidates.is_empty() {
        return Vec::new();
    }
    match cfg.strategy {
        MiningStrategy::Uniform => {
            let mut is_cand = vec![false; v.len()];
            for &c in candidates {
                is_cand[c as usize] = true;
            }
            LazyPermutation::new(v.len(), cfg.seed)
                .filter(|&id| is_cand[id as usize])
                .take(cfg.max_examples)
                .collect()
        }
        MiningStrategy::Farthest | MiningStrategy::Nearest => {
            let negs = distinct(negatives);
            let mut scored: Vec<(u32, WordId)> =
                candidates.iter().map(|&c| (min_distance(v, c, &negs), c)).collect();
            if cfg.strategy == MiningStrategy::Farthest {
                scored.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            } else {
                scored.sort_unstable();
            }
            scored.into_iter().take(cfg.max_examples).map(|(_, id)| id).collect()
        }
    }
}

/// Filter + mine in one pass. Identical output to
/// `mine(v, &filter_candidates(..), negatives, cfg)`; the uniform strategy
/// stops as soon as enough candidates have been found.
pub fn mine_positives(v: &Vocabulary, negatives: &[WordId], cfg: &MiningConfig) -> Vec<WordId> {
    match cfg.strategy {
        MiningStrategy::Uniform => {
            let negs = distinct(negatives);
            LazyPermutation::new(v.len(), cfg.seed)
                .filter(|&id| far_enough(v, id, &negs, cfg.min_neg_distance))
                .take(cfg.max_examples)
                .collect()
        }
        _ => {
            let cands = filter_candidates(v, negatives, cfg.min_neg_distance);
            mine(v, &cands, negatives, cfg)
        }
    }
}

/// Seeded uniform subsample to at most `cap` items, preserving input order.
pub fn subsample<T: Clone>(items: &[T], cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, items.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}
