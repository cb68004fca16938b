//! Query-to-reference alignment from visual-word matches.
//!
//! Matches use only words occurring exactly once in each image. The
//! commonly visible region is the percentile-trimmed bounding box of the
//! matched keypoints; matches outside it are dropped before fitting an
//! axis-separable `x' = a x + b`, `y' = c y + d` (reference to query).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{ImageFeatures, Keypoint};
use crate::proposals::BoundingBox;
use crate::vocabulary::{Vocabulary, WordId};

pub const DEFAULT_DELTA: f64 = 0.1;
pub const DEFAULT_MARGIN_FRAC: f64 = 0.1;

/// Keypoints paired with their appearance words.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantizedImage {
    pub words: Vec<WordId>,
    pub keypoints: Vec<Keypoint>,
}

impl QuantizedImage {
    pub fn new(words: Vec<WordId>, keypoints: Vec<Keypoint>) -> Result<Self> {
        if words.len() != keypoints.len() {
            return Err(Error::MalformedInput(format!(
                "{} words for {} keypoints",
                words.len(),
                keypoints.len()
            )));
        }
        Ok(QuantizedImage { words, keypoints })
    }

    pub fn from_features(img: &ImageFeatures, vocab: &Vocabulary) -> Result<Self> {
        Self::new(vocab.quantize_all(&img.descriptors)?, img.keypoints.clone())
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (WordId, Keypoint)>) -> Self {
        let (words, keypoints) = pairs.into_iter().unzip();
        QuantizedImage { words, keypoints }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub word: WordId,
    pub query: Keypoint,
    pub reference: Keypoint,
}

fn unique_words(img: &QuantizedImage) -> HashMap<WordId, Option<usize>> {
    let mut seen: HashMap<WordId, Option<usize>> = HashMap::with_capacity(img.words.len());
    for (i, &w) in img.words.iter().enumerate() {
        seen.entry(w).and_modify(|e| *e = None).or_insert(Some(i));
    }
    seen
}

/// Unique-unique word matches, ordered by word id.
pub fn match_words(q: &QuantizedImage, r: &QuantizedImage) -> Vec<Match> {
    let qu = unique_words(q);
    let ru = unique_words(r);
    let mut out: Vec<Match> = qu
        .iter()
        .filter_map(|(&w, &qi)| {
            let qi = qi?;
            let ri = (*ru.get(&w)?)?;
            Some(Match { word: w, query: q.keypoints[qi], reference: r.keypoints[ri] })
        })
        .collect();
    out.sort_by_key(|m| m.word);
    out
}

/// Closed axis-aligned rectangle in continuous image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn image(width: u32, height: u32) -> Self {
        Rect { x0: 0.0, y0: 0.0, x1: width as f64, y1: height as f64 }
    }

    pub fn contains(&self, kp: &Keypoint) -> bool {
        kp.x >= self.x0 && kp.x <= self.x1 && kp.y >= self.y0 && kp.y <= self.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibleRegion {
    pub query: Rect,
    pub reference: Rect,
}

/// 1-based `(floor(delta n), ceil((1 - delta) n))`, clamped to `[1, n]`.
pub fn percentile_indices(n: usize, delta: f64) -> (usize, usize) {
    assert!(n > 0);
    let nf = n as f64;
    let lo = ((delta * nf + 1e-9).floor() as usize).clamp(1, n);
    let hi = (((1.0 - delta) * nf - 1e-9).ceil() as usize).clamp(1, n);
    (lo, hi.max(lo))
}

fn trimmed(mut v: Vec<f64>, delta: f64) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let (lo, hi) = percentile_indices(v.len(), delta);
    (v[lo - 1], v[hi - 1])
}

fn bounds(pts: impl Iterator<Item = Keypoint> + Clone, delta: f64) -> Rect {
    let (x0, x1) = trimmed(pts.clone().map(|k| k.x).collect(), delta);
    let (y0, y1) = trimmed(pts.map(|k| k.y).collect(), delta);
    Rect { x0, y0, x1, y1 }
}

/// Trimmed bounds on both axes of both images; `None` when `m` is empty.
pub fn visible_region(m: &[Match], delta: f64) -> Option<VisibleRegion> {
    if m.is_empty() {
        return None;
    }
    Some(VisibleRegion {
        query: bounds(m.iter().map(|x| x.query), delta),
        reference: bounds(m.iter().map(|x| x.reference), delta),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VisibilityMode {
    /// Trim both axes.
    #[serde(rename = "hv")]
    HorizontalVertical,
    /// Trim x only; y spans the image.
    #[serde(rename = "h")]
    Horizontal,
    /// Whole images.
    #[serde(rename = "none")]
    None,
}

impl FromStr for VisibilityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hv" => Ok(VisibilityMode::HorizontalVertical),
            "h" => Ok(VisibilityMode::Horizontal),
            "none" => Ok(VisibilityMode::None),
            other => Err(Error::Config(format!("unknown visibility mode '{other}'"))),
        }
    }
}

impl fmt::Display for VisibilityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VisibilityMode::HorizontalVertical => "hv",
            VisibilityMode::Horizontal => "h",
            VisibilityMode::None => "none",
        })
    }
}

/// Reference to query: `x' = a x + b`, `y' = c y + d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTransform {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl LinearTransform {
    pub const IDENTITY: LinearTransform = LinearTransform { a: 1.0, b: 0.0, c: 1.0, d: 0.0 };

    pub fn apply(&self, k: &Keypoint) -> Keypoint {
        Keypoint::new(self.a * k.x + self.b, self.c * k.y + self.d)
    }
}

/// Reference to query: `[x'; y'] = M [x; y] + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineTransform {
    pub fn apply(&self, k: &Keypoint) -> Keypoint {
        Keypoint::new(
            self.m[0][0] * k.x + self.m[0][1] * k.y + self.t[0],
            self.m[1][0] * k.x + self.m[1][1] * k.y + self.t[1],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CoordTransform {
    Linear(LinearTransform),
    Affine(AffineTransform),
}

impl CoordTransform {
    pub fn apply(&self, k: &Keypoint) -> Keypoint {
        match self {
            CoordTransform::Linear(t) => t.apply(k),
            CoordTransform::Affine(t) => t.apply(k),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformModel {
    #[default]
    Linear,
    Affine,
}

impl FromStr for TransformModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(TransformModel::Linear),
            "affine" => Ok(TransformModel::Affine),
            other => Err(Error::Config(format!("unknown transform model '{other}'"))),
        }
    }
}

impl fmt::Display for TransformModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformModel::Linear => "linear",
            TransformModel::Affine => "affine",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit<T> {
    pub transform: T,
    /// Set when the input was degenerate and the identity was returned.
    pub low_confidence: bool,
}

fn axis_fit(src: &[f64], dst: &[f64]) -> Option<(f64, f64)> {
    let n = src.len() as f64;
    let ms = src.iter().sum::<f64>() / n;
    let md = dst.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (s, d) in src.iter().zip(dst) {
        sxx += (s - ms) * (s - ms);
        sxy += (s - ms) * (d - md);
    }
    if !(sxx > 0.0) {
        return None;
    }
    let a = sxy / sxx;
    Some((a, md - a * ms))
}

/// Least-squares axis-separable fit; identity plus a flag on degenerate
/// input (fewer than two matches, no spread, or non-positive scale).
pub fn fit_transform(m: &[Match]) -> Fit<LinearTransform> {
    let fallback = Fit { transform: LinearTransform::IDENTITY, low_confidence: true };
    if m.len() < 2 {
        return fallback;
    }
    let rx: Vec<f64> = m.iter().map(|x| x.reference.x).collect();
    let qx: Vec<f64> = m.iter().map(|x| x.query.x).collect();
    let ry: Vec<f64> = m.iter().map(|x| x.reference.y).collect();
    let qy: Vec<f64> = m.iter().map(|x| x.query.y).collect();
    match (axis_fit(&rx, &qx), axis_fit(&ry, &qy)) {
        (Some((a, b)), Some((c, d))) if a > 0.0 && c > 0.0 && b.is_finite() && d.is_finite() => {
            Fit { transform: LinearTransform { a, b, c, d }, low_confidence: false }
        }
        _ => fallback,
    }
}

/// Full 6-parameter least-squares fit; identity plus a flag when fewer
/// than three non-collinear matches are available.
pub fn fit_affine(m: &[Match]) -> Fit<AffineTransform> {
    let identity = AffineTransform { m: [[1.0, 0.0], [0.0, 1.0]], t: [0.0, 0.0] };
    let fallback = Fit { transform: identity, low_confidence: true };
    if m.len() < 3 {
        return fallback;
    }
    let n = m.len();
    // centre for conditioning
    let cx = m.iter().map(|x| x.reference.x).sum::<f64>() / n as f64;
    let cy = m.iter().map(|x| x.reference.y).sum::<f64>() / n as f64;
    let a = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => m[i].reference.x - cx,
        1 => m[i].reference.y - cy,
        _ => 1.0,
    });
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(svd.singular_values.min() > 1e-9 * smax.max(1.0)) {
        return fallback;
    }
    let bx = DVector::from_iterator(n, m.iter().map(|x| x.query.x));
    let by = DVector::from_iterator(n, m.iter().map(|x| x.query.y));
    let (Ok(px), Ok(py)) = (svd.solve(&bx, 1e-12), svd.solve(&by, 1e-12)) else {
        return fallback;
    };
    let mm = [[px[0], px[1]], [py[0], py[1]]];
    let t = [px[2] - px[0] * cx - px[1] * cy, py[2] - py[0] * cx - py[1] * cy];
    Fit { transform: AffineTransform { m: mm, t }, low_confidence: false }
}

/// Maps a box through `t`, grows each side by `margin_frac * width` and
/// clamps to the `width x height` query image. `None` if nothing remains.
pub fn transform_box(
    b: &BoundingBox,
    t: &CoordTransform,
    margin_frac: f64,
    width: u32,
    height: u32,
) -> Option<BoundingBox> {
    let corners = [
        Keypoint::new(b.x0 as f64, b.y0 as f64),
        Keypoint::new(b.x1 as f64, b.y0 as f64),
        Keypoint::new(b.x0 as f64, b.y1 as f64),
        Keypoint::new(b.x1 as f64, b.y1 as f64),
    ]
    .map(|k| t.apply(&k));
    let margin = margin_frac * width as f64;
    let fold = |f: fn(f64, f64) -> f64, init: f64, get: fn(&Keypoint) -> f64| corners.iter().map(get).fold(init, f);
    let x0 = fold(f64::min, f64::INFINITY, |k| k.x) - margin;
    let y0 = fold(f64::min, f64::INFINITY, |k| k.y) - margin;
    let x1 = fold(f64::max, f64::NEG_INFINITY, |k| k.x) + margin;
    let y1 = fold(f64::max, f64::NEG_INFINITY, |k| k.y) + margin;
    if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
        return None;
    }
    let clamp = |v: f64, hi: u32| v.clamp(0.0, hi as f64);
    let bx = BoundingBox {
        x0: clamp(x0.floor(), width) as u32,
        y0: clamp(y0.floor(), height) as u32,
        x1: clamp(x1.ceil(), width) as u32,
        y1: clamp(y1.ceil(), height) as u32,
    };
    (bx.x1 > bx.x0 && bx.y1 > bx.y0).then_some(bx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub delta: f64,
    pub visibility: VisibilityMode,
    /// `Delta L` as a fraction of the query image width.
    pub margin_frac: f64,
    pub model: TransformModel,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            delta: DEFAULT_DELTA,
            visibility: VisibilityMode::HorizontalVertical,
            margin_frac: DEFAULT_MARGIN_FRAC,
            model: TransformModel::Linear,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 0.5)", self.delta)));
        }
        if !(self.margin_frac >= 0.0 && self.margin_frac.is_finite()) {
            return Err(Error::Config("margin fraction must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Registration {
    pub transform: CoordTransform,
    pub query_visible: Rect,
    pub reference_visible: Rect,
    pub matches: usize,
    pub inliers: usize,
    pub low_confidence: bool,
}

/// Match, trim, restrict, fit.
pub fn register(
    q: &QuantizedImage,
    r: &QuantizedImage,
    query_dims: (u32, u32),
    ref_dims: (u32, u32),
    cfg: &RegistrationConfig,
) -> Registration {
    let all = match_words(q, r);
    let q_img = Rect::image(query_dims.0, query_dims.1);
    let r_img = Rect::image(ref_dims.0, ref_dims.1);
    let (qv, rv) = match (cfg.visibility, visible_region(&all, cfg.delta)) {
        (VisibilityMode::None, _) | (_, None) => (q_img, r_img),
        (VisibilityMode::HorizontalVertical, Some(v)) => (v.query, v.reference),
        (VisibilityMode::Horizontal, Some(v)) => (
            Rect { y0: q_img.y0, y1: q_img.y1, ..v.query },
            Rect { y0: r_img.y0, y1: r_img.y1, ..v.reference },
        ),
    };
    let kept: Vec<Match> = all
        .iter()
        .copied()
        .filter(|m| qv.contains(&m.query) && rv.contains(&m.reference))
        .collect();
    let (transform, low) = match cfg.model {
        TransformModel::Linear => {
            let f = fit_transform(&kept);
            (CoordTransform::Linear(f.transform), f.low_confidence)
        }
        TransformModel::Affine => {
            let f = fit_affine(&kept);
            (CoordTransform::Affine(f.transform), f.low_confidence)
        }
    };
    Registration {
        transform,
        query_visible: qv,
        reference_visible: rv,
        matches: all.len(),
        inliers: kept.len(),
        low_confidence: low || all.is_empty(),
    }
}
