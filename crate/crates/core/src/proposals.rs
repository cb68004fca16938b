//! Change-aware object proposals.
//!
//! Raw proposals are scored by keypoint density `N/A`, near-duplicates are
//! dropped greedily in density order, and the survivors are grouped into
//! object clusters (connected components of positive-area overlap). Every
//! image also gets a background cluster spanning the full frame.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::Keypoint;
use crate::vocabulary::ceil_log2;

pub const DEFAULT_MAX_PROPOSALS: usize = 400;
pub const DEFAULT_OVERLAP_THRESH: f64 = 0.5;

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::MalformedInput(format!(
                "degenerate box ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(BoundingBox { x0, y0, x1, y1 })
    }

    pub fn full(width: u32, height: u32) -> Self {
        BoundingBox::new(0, 0, width, height).expect("positive image size")
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.x1.saturating_sub(self.x0) as u64 * self.y1.saturating_sub(self.y0) as u64
    }

    pub fn contains(&self, kp: &Keypoint) -> bool {
        kp.x >= self.x0 as f64 && kp.x < self.x1 as f64 && kp.y >= self.y0 as f64 && kp.y < self.y1 as f64
    }

    /// Strictly-inside test (open box), used for ground-truth hits.
    pub fn contains_strictly(&self, kp: &Keypoint) -> bool {
        kp.x > self.x0 as f64 && kp.x < self.x1 as f64 && kp.y > self.y0 as f64 && kp.y < self.y1 as f64
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0)) as u64;
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0)) as u64;
        w * h
    }

    /// `A_ij / min(A_i, A_j)`.
    pub fn overlap_ratio(&self, other: &BoundingBox) -> f64 {
        self.intersection_area(other) as f64 / self.area().min(other.area()) as f64
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

/// A selected proposal with its keypoint density and pose-word width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectRegion {
    pub bbox: BoundingBox,
    pub density: f64,
}

impl ObjectRegion {
    /// Pose-word width `ceil(log2 A)`; zero for a one-pixel box.
    pub fn pose_bits(&self) -> u32 {
        pose_bits(&self.bbox)
    }
}

pub fn pose_bits(b: &BoundingBox) -> u32 {
    ceil_log2(b.area())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCluster {
    pub id: usize,
    pub regions: Vec<ObjectRegion>,
    pub is_background: bool,
}

impl ObjectCluster {
    pub fn contains(&self, kp: &Keypoint) -> bool {
        self.regions.iter().any(|r| r.bbox.contains(kp))
    }
}

pub fn score_density(b: &BoundingBox, keypoints: &[Keypoint]) -> Result<f64> {
    let area = b.area();
    if area == 0 {
        return Err(Error::MalformedInput("zero-area box".into()));
    }
    let n = keypoints.iter().filter(|k| b.contains(k)).count();
    Ok(n as f64 / area as f64)
}

/// Density-ranked greedy selection with near-duplicate elimination.
///
/// Order: density descending, then smaller area, then input order. A
/// proposal is dropped when its overlap ratio with an already-kept one
/// exceeds `overlap_thresh`. Zero-area inputs are skipped.
pub fn select_proposals(
    raw: &[BoundingBox],
    keypoints: &[Keypoint],
    max_keep: usize,
    overlap_thresh: f64,
) -> Vec<ObjectRegion> {
    let mut scored: Vec<(usize, ObjectRegion)> = raw
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            score_density(b, keypoints)
                .ok()
                .map(|density| (i, ObjectRegion { bbox: *b, density }))
        })
        .collect();
    scored.sort_by(|(ia, a), (ib, b)| {
        b.density
            .total_cmp(&a.density)
            .then(a.bbox.area().cmp(&b.bbox.area()))
            .then(ia.cmp(ib))
    });
    let mut kept: Vec<ObjectRegion> = Vec::new();
    for (_, cand) in scored {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|k| k.bbox.overlap_ratio(&cand.bbox) <= overlap_thresh) {
            kept.push(cand);
        }
    }
    kept
}

/// Groups regions into connected components of positive-area overlap and
/// appends the full-image background cluster (always the last id).
///
/// Background density is left at zero when no keypoints are supplied; use
/// [`cluster_regions_with_keypoints`] to fill it in.
pub fn cluster_regions(regions: &[ObjectRegion], width: u32, height: u32) -> Vec<ObjectCluster> {
    cluster_regions_with_keypoints(regions, width, height, &[])
}

pub fn cluster_regions_with_keypoints(
    regions: &[ObjectRegion],
    width: u32,
    height: u32,
    keypoints: &[Keypoint],
) -> Vec<ObjectCluster> {
    let mut clusters = object_clusters(regions);
    let full = BoundingBox::full(width, height);
    clusters.push(ObjectCluster {
        id: clusters.len(),
        regions: vec![ObjectRegion {
            bbox: full,
            density: score_density(&full, keypoints).unwrap_or(0.0),
        }],
        is_background: true,
    });
    clusters
}

/// Connected components only, no background cluster. Ids follow the order
/// (min x0, min y0, first input index).
pub fn object_clusters(regions: &[ObjectRegion]) -> Vec<ObjectCluster> {
    let n = regions.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if regions[i].bbox.intersection_area(&regions[j].bbox) > 0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let g = *slot.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let key = |g: &Vec<usize>| {
        let x0 = g.iter().map(|&i| regions[i].bbox.x0).min().unwrap();
        let y0 = g.iter().map(|&i| regions[i].bbox.y0).min().unwrap();
        (x0, y0, g[0])
    };
    groups.sort_by_key(key);
    groups
        .into_iter()
        .enumerate()
        .map(|(id, g)| ObjectCluster {
            id,
            regions: g.iter().map(|&i| regions[i]).collect(),
            is_background: false,
        })
        .collect()
}

/// Uniform multi-scale sliding windows for datasets without proposals.
pub fn grid_proposals(width: u32, height: u32) -> Vec<BoundingBox> {
    let mut out = Vec::new();
    let short = width.min(height);
    for frac in [8u32, 4, 2] {
        let side = (short / frac).max(1);
        let step = (side / 2).max(1);
        let mut y = 0;
        while y + side <= height {
            let mut x = 0;
            while x + side <= width {
                out.push(BoundingBox { x0: x, y0: y, x1: x + side, y1: y + side });
                x += step;
            }
            y += step;
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ProposalRecord {
    image_id: String,
    boxes: Vec<[u32; 4]>,
}

pub type ProposalSet = HashMap<String, Vec<BoundingBox>>;

pub fn load_proposals(path: impl AsRef<Path>) -> Result<ProposalSet> {
    read_proposals(File::open(path)?)
}

pub fn read_proposals<R: Read>(reader: R) -> Result<ProposalSet> {
    let mut out = HashMap::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProposalRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("line {}", lineno + 1), e.to_string()))?;
        let where_ = format!("line {} (image {})", lineno + 1, rec.image_id);
        if !seen.insert(rec.image_id.clone()) {
            return Err(Error::parse(where_, "duplicate image_id"));
        }
        let boxes = rec
            .boxes
            .iter()
            .map(|b| BoundingBox::new(b[0], b[1], b[2], b[3]))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::parse(where_, e.to_string()))?;
        out.insert(rec.image_id, boxes);
    }
    Ok(out)
}

/// Writes proposals in the given image order.
pub fn write_proposals<W: Write>(mut w: W, items: &[(String, Vec<BoundingBox>)]) -> Result<()> {
    for (id, boxes) in items {
        let rec = ProposalRecord {
            image_id: id.clone(),
            boxes: boxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_proposals(path: impl AsRef<Path>, items: &[(String, Vec<BoundingBox>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_proposals(&mut w, items)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: u32, y0: u32, x1: u32, y1: u32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn region(b: BoundingBox) -> ObjectRegion {
        ObjectRegion { bbox: b, density: 0.0 }
    }

    #[test]
    fn density_examples() {
        let b = bb(0, 0, 10, 10);
        let kps: Vec<_> = (0..5).map(|i| Keypoint::new(i as f64 + 0.5, 3.0)).collect();
        assert_eq!(score_density(&b, &kps).unwrap(), 0.05);
        assert_eq!(score_density(&bb(50, 50, 60, 60), &kps).unwrap(), 0.0);

        let full = BoundingBox::full(1232, 1616);
        let many: Vec<_> = (0..2000).map(|i| Keypoint::new((i % 1232) as f64, (i / 1232) as f64)).collect();
        assert_eq!(score_density(&full, &many).unwrap(), 2000.0 / 1_990_912.0);

        let degenerate = BoundingBox { x0: 3, y0: 3, x1: 3, y1: 9 };
        assert!(score_density(&degenerate, &kps).is_err());
        assert!(BoundingBox::new(3, 3, 3, 9).is_err());
    }

    #[test]
    fn half_open_containment() {
        let b = bb(0, 0, 10, 10);
        assert!(b.contains(&Keypoint::new(0.0, 0.0)));
        assert!(!b.contains(&Keypoint::new(10.0, 5.0)));
        assert!(!b.contains_strictly(&Keypoint::new(0.0, 5.0)));
        assert!(b.contains_strictly(&Keypoint::new(0.5, 5.0)));
    }

    #[test]
    fn identical_boxes_collapse() {
        let kps = vec![Keypoint::new(1.0, 1.0)];
        let kept = select_proposals(&[bb(0, 0, 4, 4), bb(0, 0, 4, 4)], &kps, 400, 0.5);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn overlap_ratio_arithmetic() {
        // A_i = 100, A_j = 50, intersection 30 -> 0.6
        let i = bb(0, 0, 10, 10);
        let j = bb(7, 0, 12, 10);
        assert_eq!(i.area(), 100);
        assert_eq!(j.area(), 50);
        assert_eq!(i.intersection_area(&j), 30);
        assert!((i.overlap_ratio(&j) - 0.6).abs() < 1e-15);
        // j is denser, so i is eliminated
        let kps = vec![Keypoint::new(8.0, 1.0), Keypoint::new(8.0, 2.0)];
        let kept = select_proposals(&[i, j], &kps, 400, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox, j);
    }

    #[test]
    fn caps_at_max_keep() {
        let boxes: Vec<_> = (0..500).map(|i| bb(i * 4, 0, i * 4 + 2, 2)).collect();
        let kps: Vec<_> = boxes.iter().map(|b| Keypoint::new(b.x0 as f64, 0.0)).collect();
        let kept = select_proposals(&boxes, &kps, DEFAULT_MAX_PROPOSALS, DEFAULT_OVERLAP_THRESH);
        assert_eq!(kept.len(), 400);
        // equal density and area: input order decides
        assert_eq!(kept[0].bbox, boxes[0]);
        assert_eq!(kept[399].bbox, boxes[399]);
    }

    #[test]
    fn empty_input() {
        assert!(select_proposals(&[], &[], 400, 0.5).is_empty());
        let c = cluster_regions(&[], 20, 10);
        assert_eq!(c.len(), 1);
        assert!(c[0].is_background);
        assert_eq!(c[0].regions[0].bbox, bb(0, 0, 20, 10));
    }

    #[test]
    fn component_structure() {
        let a = bb(0, 0, 10, 10);
        let b = bb(5, 5, 15, 15);
        let c = bb(50, 50, 60, 60);
        let cl = cluster_regions(&[region(c), region(a), region(b)], 100, 100);
        assert_eq!(cl.len(), 3);
        assert_eq!(cl[0].regions.iter().map(|r| r.bbox).collect::<Vec<_>>(), vec![a, b]);
        assert_eq!(cl[1].regions[0].bbox, c);
        assert!(cl[2].is_background);
        assert_eq!(cl.iter().map(|c| c.id).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn chain_is_one_component_and_touching_edges_do_not_merge() {
        let a = bb(0, 0, 10, 10);
        let b = bb(8, 0, 18, 10);
        let c = bb(16, 0, 26, 10);
        assert_eq!(a.intersection_area(&c), 0);
        let cl = object_clusters(&[region(a), region(b), region(c)]);
        assert_eq!(cl.len(), 1);
        assert_eq!(cl[0].regions.len(), 3);

        let touching = object_clusters(&[region(bb(0, 0, 10, 10)), region(bb(10, 0, 20, 10))]);
        assert_eq!(touching.len(), 2);
    }

    #[test]
    fn pose_bits_is_ceil_log2_area() {
        assert_eq!(pose_bits(&bb(0, 0, 1, 1)), 0);
        assert_eq!(pose_bits(&bb(0, 0, 2, 1)), 1);
        assert_eq!(pose_bits(&bb(0, 0, 32, 32)), 10);
        assert_eq!(pose_bits(&bb(0, 0, 33, 32)), 11);
    }

    #[test]
    fn proposals_file_round_trip() {
        let items = vec![("a".to_string(), vec![bb(0, 0, 4, 4), bb(1, 2, 3, 5)]), ("b".to_string(), vec![])];
        let mut buf = Vec::new();
        write_proposals(&mut buf, &items).unwrap();
        let back = read_proposals(buf.as_slice()).unwrap();
        assert_eq!(back["a"], items[0].1);
        assert!(back["b"].is_empty());
        let bad = r#"{"image_id":"z","boxes":[[4,4,4,8]]}"#;
        assert!(read_proposals(bad.as_bytes()).is_err());
    }

    #[test]
    fn grid_fallback_stays_in_image() {
        let g = grid_proposals(64, 48);
        assert!(!g.is_empty());
        assert!(g.iter().all(|b| b.within(64, 48) && b.area() > 0));
    }

    fn brute_components(regions: &[ObjectRegion]) -> Vec<Vec<BoundingBox>> {
        // repeated relaxation of labels until fixpoint
        let n = regions.len();
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    if regions[i].bbox.intersection_area(&regions[j].bbox) > 0 && label[j] < label[i] {
                        label[i] = label[j];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut comps: Vec<Vec<BoundingBox>> = Vec::new();
        let mut uniq: Vec<usize> = label.clone();
        uniq.sort();
        uniq.dedup();
        for l in uniq {
            comps.push((0..n).filter(|&i| label[i] == l).map(|i| regions[i].bbox).collect());
        }
        comps.sort_by_key(|c| (c.iter().map(|b| b.x0).min(), c.iter().map(|b| b.y0).min()));
        comps
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..90, 0u32..90, 1u32..20, 1u32..20).prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn clustering_matches_brute_force(boxes in prop::collection::vec(arb_box(), 0..=20)) {
            let regions: Vec<_> = boxes.iter().map(|b| region(*b)).collect();
            let got: Vec<Vec<BoundingBox>> = object_clusters(&regions)
                .into_iter()
                .map(|c| c.regions.iter().map(|r| r.bbox).collect())
                .collect();
            let mut want = brute_components(&regions);
            let mut got_sorted = got.clone();
            for c in want.iter_mut().chain(got_sorted.iter_mut()) {
                c.sort_by_key(|b| (b.x0, b.y0, b.x1, b.y1));
            }
            got_sorted.sort();
            want.sort();
            prop_assert_eq!(got_sorted, want);
        }

        #[test]
        fn selection_invariants(
            boxes in prop::collection::vec(arb_box(), 0..60),
            pts in prop::collection::vec((0.0f64..110.0, 0.0f64..110.0), 0..80),
            cap in 1usize..30,
        ) {
            let kps: Vec<_> = pts.iter().map(|(x, y)| Keypoint::new(*x, *y)).collect();
            let kept = select_proposals(&boxes, &kps, cap, 0.5);
            prop_assert!(kept.len() <= cap);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.bbox.overlap_ratio(&b.bbox) <= 0.5);
                }
            }
            if kept.len() < cap {
                // every dropped proposal has a denser-or-equal kept near-duplicate
                for b in &boxes {
                    if kept.iter().any(|k| k.bbox == *b) { continue; }
                    let d = score_density(b, &kps).unwrap();
                    prop_assert!(kept.iter().any(|k| k.bbox.overlap_ratio(b) > 0.5 && k.density >= d));
                }
            }
        }
    }
}
