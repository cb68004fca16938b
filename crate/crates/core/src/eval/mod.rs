//! Evaluation protocol: collections of query/reference pairs, pooled
//! rankings, top-X% success and success-ratio curves.

mod ablation;
mod collections;
mod pipeline;
pub mod synth;

use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::ranking::cmp_key;

pub use ablation::{ablate, ablation_variants, AblationResult, Variant};
pub use collections::{
    build_collections, load_annotations, read_annotations, save_annotations, write_annotations, Collection, Pair,
};
pub use pipeline::{evaluate, oracle_scores, Dataset, Pipeline, PipelineConfig, PairScores};

/// The top-X levels in percent.
pub const X_PERCENT: [f64; 6] = [0.1, 0.25, 0.5, 1.0, 2.5, 5.0];
const X_BASIS_POINTS: [usize; 6] = [10, 25, 50, 100, 250, 500];

/// `floor(X * total)` for every level, in exact integer arithmetic.
pub fn thresholds(total: usize) -> [usize; 6] {
    X_BASIS_POINTS.map(|bp| total * bp / 10_000)
}

/// One pooled feature: its sort key and whether it is a ground-truth hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PooledFeature {
    pub key: (bool, f64),
    pub hit: bool,
}

/// Rank of the best ground-truth feature, counting every non-hit feature
/// whose key ties it as ranked ahead. Independent of input order.
pub fn best_hit_rank(features: &[PooledFeature]) -> Option<usize> {
    let best = features
        .iter()
        .filter(|f| f.hit)
        .map(|f| f.key)
        .min_by(cmp_key)?;
    let ahead = features
        .iter()
        .filter(|f| !f.hit && cmp_key(&f.key, &best) != std::cmp::Ordering::Greater)
        .count();
    Some(ahead + 1)
}

/// Success flags at every X level for one pooled collection.
pub fn collection_success(features: &[PooledFeature]) -> [bool; 6] {
    let th = thresholds(features.len());
    match best_hit_rank(features) {
        Some(rank) => th.map(|t| rank <= t),
        None => [false; 6],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuccessCurve {
    pub method: String,
    /// Success ratio per entry of [`X_PERCENT`].
    pub ratios: [f64; 6],
    pub collections: usize,
}

impl SuccessCurve {
    pub fn from_flags(method: impl Into<String>, flags: &[[bool; 6]]) -> Self {
        let n = flags.len();
        let mut ratios = [0.0; 6];
        for (k, r) in ratios.iter_mut().enumerate() {
            let hits = flags.iter().filter(|f| f[k]).count();
            *r = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
        }
        SuccessCurve { method: method.into(), ratios, collections: n }
    }

    pub fn is_monotone(&self) -> bool {
        self.ratios.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn at(&self, x_percent: f64) -> Option<f64> {
        X_PERCENT.iter().position(|&x| x == x_percent).map(|k| self.ratios[k])
    }
}

#[derive(Serialize)]
struct CurveRow<'a> {
    method: &'a str,
    #[serde(rename = "X_percent")]
    x_percent: f64,
    success_ratio: f64,
}

/// `method, X_percent, success_ratio` rows.
pub fn write_curves_csv<W: Write>(w: W, curves: &[SuccessCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for c in curves {
        for (k, &x) in X_PERCENT.iter().enumerate() {
            w.serialize(CurveRow { method: &c.method, x_percent: x, success_ratio: c.ratios[k] })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(score: f64, hit: bool) -> PooledFeature {
        PooledFeature { key: (false, score), hit }
    }

    #[test]
    fn thresholds_at_200k_features() {
        assert_eq!(thresholds(200_000), [200, 500, 1000, 2000, 5000, 10000]);
        assert_eq!(thresholds(4000), [4, 10, 20, 40, 100, 200]);
        assert_eq!(thresholds(0), [0; 6]);
    }

    #[test]
    fn rank_150_succeeds_at_first_level() {
        let mut v: Vec<PooledFeature> = (0..200_000).map(|i| f(1.0 + i as f64, false)).collect();
        v[149] = f(150.0, true);
        assert_eq!(best_hit_rank(&v), Some(150));
        assert_eq!(collection_success(&v), [true; 6]);
        v[149] = f(150.0, false);
        v[250] = f(251.0, true);
        assert_eq!(collection_success(&v), [false, true, true, true, true, true]);
    }

    #[test]
    fn ties_count_against_hits() {
        let v = vec![f(1.0, false), f(1.0, true), f(1.0, true), f(2.0, false)];
        assert_eq!(best_hit_rank(&v), Some(2));
        let mut rev = v.clone();
        rev.reverse();
        assert_eq!(best_hit_rank(&rev), Some(2));
        assert_eq!(best_hit_rank(&[f(1.0, false)]), None);
    }

    #[test]
    fn excluded_features_rank_last() {
        let v = vec![PooledFeature { key: (true, 0.5), hit: false }, f(3.0, true)];
        assert_eq!(best_hit_rank(&v), Some(1));
    }

    #[test]
    fn curve_ratios() {
        let c = SuccessCurve::from_flags("m", &[[false, true, true, true, true, true], [true; 6]]);
        assert_eq!(c.ratios, [0.5, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(c.is_monotone());
        assert_eq!(c.at(1.0), Some(1.0));
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &[c]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,X_percent,success_ratio\nm,0.1,0.5\n"), "{text}");
    }
}
