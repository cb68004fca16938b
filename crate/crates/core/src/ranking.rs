//! Change scoring of query features against a reference image model,
//! followed by query-side non-maximal suppression.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::predict_change_prob;
use crate::error::{Error, Result};
use crate::feature::{ImageFeatures, Keypoint};
use crate::map::ImageModel;
use crate::proposals::{
    object_clusters, select_proposals, BoundingBox, ObjectCluster,
    DEFAULT_MAX_PROPOSALS, DEFAULT_OVERLAP_THRESH,
};
use crate::registration::{register, transform_box, QuantizedImage, Rect, Registration, RegistrationConfig};
use crate::vocabulary::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    pub suppression: bool,
    pub registration: RegistrationConfig,
    pub max_proposals: usize,
    pub overlap_thresh: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            suppression: true,
            registration: RegistrationConfig::default(),
            max_proposals: DEFAULT_MAX_PROPOSALS,
            overlap_thresh: DEFAULT_OVERLAP_THRESH,
        }
    }
}

/// Reference clusters that may explain a query feature.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Outside the query-side visible region; never a change candidate.
    Excluded,
    /// Inside the visible region but outside every transformed box.
    Isolated,
    Clusters(Vec<usize>),
}

/// Per-feature membership in the transformed, expanded reference boxes.
pub fn assign_clusters(keypoints: &[Keypoint], cluster_boxes: &[Vec<BoundingBox>], visible: &Rect) -> Vec<Assignment> {
    keypoints
        .iter()
        .map(|kp| {
            if !visible.contains(kp) {
                return Assignment::Excluded;
            }
            let ids: Vec<usize> = cluster_boxes
                .iter()
                .enumerate()
                .filter(|(_, boxes)| boxes.iter().any(|b| b.contains(kp)))
                .map(|(i, _)| i)
                .collect();
            if ids.is_empty() {
                Assignment::Isolated
            } else {
                Assignment::Clusters(ids)
            }
        })
        .collect()
}

/// Minimum over the assigned clusters' change probabilities.
pub fn combine_probabilities(per_cluster: impl IntoIterator<Item = f64>) -> Option<f64> {
    per_cluster.into_iter().fold(None, |acc, p| Some(acc.map_or(p, |a: f64| a.min(p))))
}

/// Probability for one feature given its assignment.
///
/// Excluded features get 0. Isolated features are unexplained by the
/// reference and get 1.
pub fn score_feature(q: &crate::feature::Descriptor, a: &Assignment, model: &ImageModel) -> f64 {
    match a {
        Assignment::Excluded => 0.0,
        Assignment::Isolated => 1.0,
        Assignment::Clusters(ids) => {
            combine_probabilities(ids.iter().map(|&i| predict_change_prob(&model.clusters[i].classifier, q)))
                .unwrap_or(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedFeature {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub p: f64,
    /// Query object cluster, `None` for isolated or excluded features.
    pub query_cluster: Option<usize>,
    pub r: usize,
    pub score: f64,
    pub excluded: bool,
}

impl RankedFeature {
    /// Sort key: excluded features last, then ascending score.
    pub fn key(&self) -> (bool, f64) {
        (self.excluded, self.score)
    }
}

/// Orders two ranked features; ties broken by the caller.
pub fn cmp_key(a: &(bool, f64), b: &(bool, f64)) -> std::cmp::Ordering {
    a.0.cmp(&b.0).then(a.1.total_cmp(&b.1))
}

/// Unique query-cluster membership: among clusters with a region that
/// contains the keypoint, the one whose containing region is densest; ties
/// go to the lower cluster id.
pub fn query_membership(kp: &Keypoint, clusters: &[ObjectCluster]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for c in clusters.iter().filter(|c| !c.is_background) {
        let dens = c
            .regions
            .iter()
            .filter(|r| r.bbox.contains(kp))
            .map(|r| r.density)
            .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.max(d))));
        if let Some(d) = dens {
            if best.map_or(true, |(bd, bid)| d > bd || (d == bd && c.id < bid)) {
                best = Some((d, c.id));
            }
        }
    }
    best.map(|(_, id)| id)
}

/// Intra-cluster ranks and augmented scores, returned in final order.
///
/// With `suppression` off every scored feature has `r = 1`, so the order
/// reduces to descending `p`. Excluded features always sort last with
/// `p = 0`, `r = C_max + 1`.
pub fn nms_rerank(
    keypoints: &[Keypoint],
    clusters: &[ObjectCluster],
    p: &[f64],
    excluded: &[bool],
    suppression: bool,
) -> Vec<RankedFeature> {
    let n = keypoints.len();
    assert_eq!(p.len(), n);
    assert_eq!(excluded.len(), n);
    let membership: Vec<Option<usize>> = (0..n)
        .map(|i| if !suppression || excluded[i] { None } else { query_membership(&keypoints[i], clusters) })
        .collect();
    let n_ids = clusters.iter().map(|c| c.id + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_ids];
    for (i, m) in membership.iter().enumerate() {
        if let Some(c) = m {
            members[*c].push(i);
        }
    }
    let c_max = if suppression { members.iter().map(Vec::len).max().unwrap_or(0) } else { 0 };
    let mut r = vec![c_max + 1; n];
    for list in &mut members {
        list.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        for (k, &i) in list.iter().enumerate() {
            r[i] = k + 1;
        }
    }
    let mut out: Vec<RankedFeature> = (0..n)
        .map(|i| {
            let pi = if excluded[i] { 0.0 } else { p[i] };
            RankedFeature {
                index: i,
                x: keypoints[i].x,
                y: keypoints[i].y,
                p: pi,
                query_cluster: membership[i],
                r: r[i],
                score: r[i] as f64 + (1.0 - pi),
                excluded: excluded[i],
            }
        })
        .collect();
    out.sort_by(|a, b| cmp_key(&a.key(), &b.key()).then(a.index.cmp(&b.index)));
    out
}

/// Everything [`rank_query`] produced for one query image.
#[derive(Clone, Debug)]
pub struct QueryRanking {
    pub registration: Registration,
    pub assignments: Vec<Assignment>,
    pub ranked: Vec<RankedFeature>,
}

/// Scores and re-ranks a query image against its paired reference model.
///
/// Registration uses the words and keypoints stored in the reference
/// model. `query_proposals = None` skips suppression clustering (all
/// scored features isolated, ordered by `p`).
pub fn rank_query(
    query: &ImageFeatures,
    query_proposals: Option<&[BoundingBox]>,
    reference: &ImageModel,
    vocab: &Vocabulary,
    cfg: &RankingConfig,
) -> Result<QueryRanking> {
    cfg.registration.validate()?;
    if let Some(w) = query.descriptor_width() {
        if w != vocab.width() {
            return Err(Error::MalformedInput(format!(
                "query {} has {w}-bit descriptors, vocabulary is {}-bit",
                query.image_id,
                vocab.width()
            )));
        }
    }
    let q = QuantizedImage::from_features(query, vocab)?;
    let r = QuantizedImage::from_pairs(reference.compressed().words_and_keypoints()?);
    let reg = register(
        &q,
        &r,
        (query.width, query.height),
        (reference.width, reference.height),
        &cfg.registration,
    );
    let boxes: Vec<Vec<BoundingBox>> = reference
        .clusters
        .iter()
        .map(|c| {
            c.compressed
                .regions
                .iter()
                .filter_map(|reg_| {
                    transform_box(&reg_.bbox, &reg.transform, cfg.registration.margin_frac, query.width, query.height)
                })
                .collect()
        })
        .collect();
    let assignments = assign_clusters(&query.keypoints, &boxes, &reg.query_visible);
    let p: Vec<f64> = query
        .descriptors
        .par_iter()
        .zip(&assignments)
        .map(|(d, a)| score_feature(d, a, reference))
        .collect();
    let excluded: Vec<bool> = assignments.iter().map(|a| *a == Assignment::Excluded).collect();
    let clusters = match query_proposals {
        Some(props) if cfg.suppression => {
            let raw: Vec<BoundingBox> = props.iter().copied().filter(|b| b.within(query.width, query.height)).collect();
            let regions = select_proposals(&raw, &query.keypoints, cfg.max_proposals, cfg.overlap_thresh);
            object_clusters(&regions)
        }
        _ => Vec::new(),
    };
    let ranked = nms_rerank(&query.keypoints, &clusters, &p, &excluded, cfg.suppression);
    Ok(QueryRanking { registration: reg, assignments, ranked })
}

#[derive(Serialize)]
struct Row<'a> {
    collection_id: usize,
    image_id: &'a str,
    feature_index: usize,
    x: f64,
    y: f64,
    p: f64,
    r: usize,
    score: f64,
    is_ground_truth_change: bool,
}

/// Appends ranking rows; `gt` flags each feature by index.
pub fn write_ranking_csv<W: Write>(
    w: &mut csv::Writer<W>,
    collection_id: usize,
    image_id: &str,
    ranked: &[RankedFeature],
    gt: &[bool],
) -> Result<()> {
    for f in ranked {
        w.serialize(Row {
            collection_id,
            image_id,
            feature_index: f.index,
            x: f.x,
            y: f.y,
            p: f.p,
            r: f.r,
            score: f.score,
            is_ground_truth_change: gt.get(f.index).copied().unwrap_or(false),
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::ObjectRegion;

    fn cluster(id: usize, boxes: &[(u32, u32, u32, u32, f64)]) -> ObjectCluster {
        ObjectCluster {
            id,
            regions: boxes
                .iter()
                .map(|&(x0, y0, x1, y1, density)| ObjectRegion { bbox: BoundingBox::new(x0, y0, x1, y1).unwrap(), density })
                .collect(),
            is_background: false,
        }
    }

    #[test]
    fn probability_is_minimum() {
        assert_eq!(combine_probabilities([0.9, 0.4]), Some(0.4));
        assert_eq!(combine_probabilities([0.7]), Some(0.7));
        assert_eq!(combine_probabilities([]), None);
    }

    #[test]
    fn assignment_cases() {
        let boxes = vec![
            vec![BoundingBox::new(0, 0, 50, 50).unwrap()],
            vec![BoundingBox::new(25, 25, 75, 75).unwrap()],
        ];
        let vis = Rect { x0: 0.0, y0: 0.0, x1: 90.0, y1: 90.0 };
        let kps = [Keypoint::new(30.0, 30.0), Keypoint::new(80.0, 80.0), Keypoint::new(95.0, 10.0)];
        let a = assign_clusters(&kps, &boxes, &vis);
        assert_eq!(a, vec![Assignment::Clusters(vec![0, 1]), Assignment::Isolated, Assignment::Excluded]);
    }

    #[test]
    fn augmented_score_and_isolated_rank() {
        let kps: Vec<Keypoint> = (0..7).map(|i| Keypoint::new(5.0 + i as f64, 5.0)).collect();
        let mut kps2 = kps.clone();
        kps2[6] = Keypoint::new(500.0, 500.0);
        let clusters = vec![cluster(0, &[(0, 0, 20, 20, 0.1)])];
        // first six in the cluster, the last isolated
        let p = vec![0.8, 0.1, 0.2, 0.3, 0.4, 0.5, 0.9];
        let out = nms_rerank(&kps2, &clusters, &p, &[false; 7], true);
        let top = &out[0];
        assert_eq!((top.index, top.r), (0, 1));
        assert!((top.score - 1.2).abs() < 1e-12);
        let iso = out.iter().find(|f| f.index == 6).unwrap();
        assert_eq!(iso.r, 7);
        assert_eq!(iso.query_cluster, None);
    }

    #[test]
    fn diversity_by_construction() {
        let kps = vec![Keypoint::new(5.0, 5.0), Keypoint::new(105.0, 5.0), Keypoint::new(6.0, 6.0)];
        let clusters = vec![cluster(0, &[(0, 0, 20, 20, 0.1)]), cluster(1, &[(100, 0, 120, 20, 0.1)])];
        let p = vec![0.9, 0.9, 1.0];
        let out = nms_rerank(&kps, &clusters, &p, &[false; 3], true);
        // feature 2 has p = 1 but is second in cluster 0
        let order: Vec<usize> = out.iter().map(|f| f.index).collect();
        assert_eq!(order, vec![2, 1, 0]);
        assert_eq!(out[0].r, 1);
        assert_eq!(out[2].r, 2);
        assert!((out[2].score - 2.1).abs() < 1e-12);
    }

    #[test]
    fn two_clusters_top_one_each() {
        let kps = vec![Keypoint::new(5.0, 5.0), Keypoint::new(105.0, 5.0), Keypoint::new(6.0, 6.0)];
        let clusters = vec![cluster(0, &[(0, 0, 20, 20, 0.1)]), cluster(1, &[(100, 0, 120, 20, 0.1)])];
        let p = vec![0.9, 0.9, 0.5];
        let out = nms_rerank(&kps, &clusters, &p, &[false; 3], true);
        assert_eq!(out[0].index, 0);
        assert_eq!(out[1].index, 1);
        assert!((out[0].score - 1.1).abs() < 1e-12 && (out[1].score - 1.1).abs() < 1e-12);
    }

    #[test]
    fn densest_containing_region_wins() {
        let clusters = vec![cluster(0, &[(0, 0, 50, 50, 0.1)]), cluster(1, &[(10, 10, 30, 30, 0.3)])];
        assert_eq!(query_membership(&Keypoint::new(15.0, 15.0), &clusters), Some(1));
        assert_eq!(query_membership(&Keypoint::new(40.0, 40.0), &clusters), Some(0));
        let tied = vec![cluster(0, &[(0, 0, 50, 50, 0.2)]), cluster(1, &[(10, 10, 30, 30, 0.2)])];
        assert_eq!(query_membership(&Keypoint::new(15.0, 15.0), &tied), Some(0));
    }

    #[test]
    fn excluded_last_and_no_suppression_is_p_order() {
        let kps: Vec<Keypoint> = (0..4).map(|i| Keypoint::new(i as f64, 0.0)).collect();
        let p = vec![0.2, 0.9, 0.5, 1.0];
        let out = nms_rerank(&kps, &[], &p, &[false, false, false, true], false);
        let order: Vec<usize> = out.iter().map(|f| f.index).collect();
        assert_eq!(order, vec![1, 2, 0, 3]);
        assert_eq!(out[3].p, 0.0);
    }
}
