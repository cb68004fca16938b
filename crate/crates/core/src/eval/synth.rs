//! Synthetic scenes with known change ground truth.
//!
//! A reference scene holds a few rectangular objects, each built from a
//! handful of prototype descriptors, plus scattered background features
//! with their own prototypes. Prototypes of one scene are perturbations of
//! a common base descriptor, so a scene occupies a bounded patch of
//! Hamming space. Every observed descriptor is its prototype with
//! `noise_bits` random bit flips. A query re-observes the scene through a
//! linear transform with fresh noise; change queries also plant an object
//! whose prototypes are far from every reference prototype. An EKB filler
//! pads the descriptor pool so a vocabulary of exactly `2^vocab_bits` words
//! contains every reference descriptor.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collections::{write_annotations, Pair};
use super::pipeline::Dataset;
use crate::error::{Error, Result};
use crate::feature::{write_features, Descriptor, ImageFeatures, Keypoint, DEFAULT_FEATURE_CAP};
use crate::mining::DEFAULT_MIN_NEG_DISTANCE;
use crate::proposals::{write_proposals, BoundingBox, ProposalSet};
use crate::registration::LinearTransform;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub n_change: usize,
    pub n_nochange: usize,
    pub width: u32,
    pub height: u32,
    pub descriptor_bits: u32,
    pub features_per_image: usize,
    pub objects_per_scene: usize,
    pub features_per_object: usize,
    pub prototypes_per_object: usize,
    pub change_features: usize,
    /// Bits flipped from a per-scene base descriptor to make each
    /// prototype; `None` draws prototypes uniformly at random.
    pub prototype_spread: Option<u32>,
    pub noise_bits: u32,
    /// Minimum Hamming distance from change prototypes to every reference
    /// prototype, before noise.
    pub change_separation: u32,
    pub transform: LinearTransform,
    pub random_proposals: usize,
    /// Pads the pool to `2^vocab_bits` distinct descriptors; 0 disables.
    pub vocab_bits: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_scenes: 40,
            n_change: 20,
            n_nochange: 60,
            width: 640,
            height: 480,
            descriptor_bits: 256,
            features_per_image: 200,
            objects_per_scene: 4,
            features_per_object: 30,
            prototypes_per_object: 6,
            change_features: 20,
            prototype_spread: Some(48),
            noise_bits: 8,
            change_separation: 64,
            transform: LinearTransform::IDENTITY,
            random_proposals: 4,
            vocab_bits: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Noise-free, identity-transform scenes.
    pub fn noiseless() -> Self {
        SynthConfig { noise_bits: 0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.descriptor_bits;
        if d == 0 || d % 8 != 0 {
            return Err(Error::Config(format!("descriptor width {d} is not a positive multiple of 8")));
        }
        if self.change_separation as u64 + self.noise_bits as u64 > d as u64 {
            return Err(Error::Config(format!(
                "change separation {} plus noise {} exceeds descriptor width {d}",
                self.change_separation, self.noise_bits
            )));
        }
        if self.change_separation <= self.noise_bits + DEFAULT_MIN_NEG_DISTANCE {
            return Err(Error::Config(format!(
                "change separation {} must exceed noise {} plus the mining threshold {}",
                self.change_separation, self.noise_bits, DEFAULT_MIN_NEG_DISTANCE
            )));
        }
        if self.n_scenes == 0 {
            return Err(Error::Config("at least one scene is required".into()));
        }
        if self.width < 64 || self.height < 64 {
            return Err(Error::Config("images must be at least 64x64".into()));
        }
        if self.features_per_image > DEFAULT_FEATURE_CAP {
            return Err(Error::Config(format!("at most {DEFAULT_FEATURE_CAP} features per image")));
        }
        if self.objects_per_scene > 0 && self.prototypes_per_object == 0 {
            return Err(Error::Config("objects need at least one prototype".into()));
        }
        if self.prototype_spread.is_some_and(|k| k > d) {
            return Err(Error::Config(format!("prototype spread exceeds descriptor width {d}")));
        }
        if self.vocab_bits > 24 {
            return Err(Error::Config("vocab_bits above 24 is not supported by the generator".into()));
        }
        let t = &self.transform;
        if !(t.a > 0.0 && t.c > 0.0) {
            return Err(Error::Config("transform scales must be positive".into()));
        }
        Ok(())
    }
}

/// Generated images, proposals, annotations and EKB filler.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub reference: Vec<ImageFeatures>,
    pub reference_proposals: Vec<(String, Vec<BoundingBox>)>,
    pub queries: Vec<ImageFeatures>,
    pub query_proposals: Vec<(String, Vec<BoundingBox>)>,
    pub pairs: Vec<Pair>,
    pub ekb: Vec<ImageFeatures>,
}

pub const REFERENCE_FILE: &str = "reference.jsonl";
pub const REFERENCE_PROPOSALS_FILE: &str = "reference_proposals.jsonl";
pub const QUERY_FILE: &str = "query.jsonl";
pub const QUERY_PROPOSALS_FILE: &str = "query_proposals.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const EKB_FILE: &str = "ekb.jsonl";
pub const CONFIG_FILE: &str = "synth_config.json";

impl SynthDataset {
    pub fn dataset(&self) -> Result<Dataset> {
        let set = |v: &[(String, Vec<BoundingBox>)]| -> ProposalSet { v.iter().cloned().collect() };
        Dataset::new(
            self.reference.clone(),
            Some(set(&self.reference_proposals)),
            self.queries.clone(),
            Some(set(&self.query_proposals)),
            self.pairs.clone(),
        )
    }

    /// Reference images followed by the filler; the vocabulary pool.
    pub fn vocabulary_pool(&self) -> Vec<ImageFeatures> {
        self.reference.iter().chain(&self.ekb).cloned().collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_features(File::create(dir.join(REFERENCE_FILE))?, &self.reference)?;
        write_proposals(File::create(dir.join(REFERENCE_PROPOSALS_FILE))?, &self.reference_proposals)?;
        write_features(File::create(dir.join(QUERY_FILE))?, &self.queries)?;
        write_proposals(File::create(dir.join(QUERY_PROPOSALS_FILE))?, &self.query_proposals)?;
        write_annotations(File::create(dir.join(ANNOTATIONS_FILE))?, &self.pairs)?;
        write_features(File::create(dir.join(EKB_FILE))?, &self.ekb)?;
        let mut f = File::create(dir.join(CONFIG_FILE))?;
        serde_json::to_writer_pretty(&mut f, &self.config)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn flip(proto: &Descriptor, n: u32, rng: &mut ChaCha8Rng) -> Descriptor {
    let mut d = proto.clone();
    for i in rand::seq::index::sample(rng, proto.width() as usize, n as usize) {
        d.flip_bit(i as u32);
    }
    d
}

fn point_in(b: &BoundingBox, rng: &mut ChaCha8Rng) -> Keypoint {
    // strictly interior, at least half a pixel from every edge
    let x = rng.gen_range(b.x0 as f64 + 0.5..b.x1 as f64 - 0.5);
    let y = rng.gen_range(b.y0 as f64 + 0.5..b.y1 as f64 - 0.5);
    Keypoint::new(x, y)
}

fn random_box(rng: &mut ChaCha8Rng, w: u32, h: u32, lo: u32, hi: u32) -> BoundingBox {
    let bw = rng.gen_range(lo..=hi.min(w));
    let bh = rng.gen_range(lo..=hi.min(h));
    let x0 = rng.gen_range(0..=w - bw);
    let y0 = rng.gen_range(0..=h - bh);
    BoundingBox { x0, y0, x1: x0 + bw, y1: y0 + bh }
}

fn jitter(b: &BoundingBox, rng: &mut ChaCha8Rng, w: u32, h: u32) -> Option<BoundingBox> {
    let dx = (b.width() / 10).max(1) as i64;
    let dy = (b.height() / 10).max(1) as i64;
    let mut s = |v: u32, d: i64, hi: u32| (v as i64 + rng.gen_range(-d..=d)).clamp(0, hi as i64) as u32;
    let x0 = s(b.x0, dx, w);
    let y0 = s(b.y0, dy, h);
    let x1 = s(b.x1, dx, w);
    let y1 = s(b.y1, dy, h);
    BoundingBox::new(x0, y0, x1, y1).ok()
}

fn map_box(b: &BoundingBox, t: &LinearTransform, w: u32, h: u32) -> Option<BoundingBox> {
    let x0 = (t.a * b.x0 as f64 + t.b).floor().clamp(0.0, w as f64) as u32;
    let x1 = (t.a * b.x1 as f64 + t.b).ceil().clamp(0.0, w as f64) as u32;
    let y0 = (t.c * b.y0 as f64 + t.d).floor().clamp(0.0, h as f64) as u32;
    let y1 = (t.c * b.y1 as f64 + t.d).ceil().clamp(0.0, h as f64) as u32;
    BoundingBox::new(x0, y0, x1, y1).ok()
}

struct Scene {
    protos: Vec<usize>,
    keypoints: Vec<Keypoint>,
    proposals: Vec<BoundingBox>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const SCENE_STREAM: u64 = 0;
const PAIR_STREAM: u64 = 1 << 32;
const EKB_STREAM: u64 = 2 << 32;

/// Generates the whole dataset; identical configs give identical output.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (w, h, dbits) = (cfg.width, cfg.height, cfg.descriptor_bits);
    let mut prototypes: Vec<Descriptor> = Vec::new();
    let mut scenes: Vec<Scene> = Vec::with_capacity(cfg.n_scenes);
    let mut reference = Vec::with_capacity(cfg.n_scenes);
    let mut reference_proposals = Vec::with_capacity(cfg.n_scenes);

    for s in 0..cfg.n_scenes {
        let mut rng = rng_for(cfg.seed, SCENE_STREAM + s as u64);
        let (lo, hi) = ((w.min(h) / 8).max(8), (w.min(h) / 4).max(16));
        let mut objects: Vec<BoundingBox> = Vec::new();
        for _ in 0..1000 {
            if objects.len() == cfg.objects_per_scene {
                break;
            }
            let b = random_box(&mut rng, w, h, lo, hi);
            let grown = BoundingBox {
                x0: b.x0.saturating_sub(8),
                y0: b.y0.saturating_sub(8),
                x1: b.x1 + 8,
                y1: b.y1 + 8,
            };
            if objects.iter().all(|o| o.intersection_area(&grown) == 0) {
                objects.push(b);
            }
        }
        let base = Descriptor::random(&mut rng, dbits);
        let fresh = |rng: &mut ChaCha8Rng| match cfg.prototype_spread {
            Some(k) => flip(&base, k, rng),
            None => Descriptor::random(rng, dbits),
        };
        let mut protos = Vec::new();
        let mut keypoints = Vec::new();
        for obj in &objects {
            let first = prototypes.len();
            for _ in 0..cfg.prototypes_per_object {
                prototypes.push(fresh(&mut rng));
            }
            for j in 0..cfg.features_per_object.min(cfg.features_per_image - keypoints.len()) {
                protos.push(first + j % cfg.prototypes_per_object);
                keypoints.push(point_in(obj, &mut rng));
            }
        }
        let full = BoundingBox::full(w, h);
        while keypoints.len() < cfg.features_per_image {
            protos.push(prototypes.len());
            prototypes.push(fresh(&mut rng));
            keypoints.push(point_in(&full, &mut rng));
        }
        let mut proposals = Vec::new();
        for obj in &objects {
            proposals.push(*obj);
            for _ in 0..2 {
                proposals.extend(jitter(obj, &mut rng, w, h));
            }
        }
        for _ in 0..cfg.random_proposals {
            proposals.push(random_box(&mut rng, w, h, lo / 2, hi));
        }
        let descriptors = protos.iter().map(|&p| flip(&prototypes[p], cfg.noise_bits, &mut rng)).collect();
        let id = format!("ref{s:04}");
        reference.push(ImageFeatures::new(id.clone(), w, h, keypoints.clone(), descriptors)?);
        reference_proposals.push((id, proposals.clone()));
        scenes.push(Scene { protos, keypoints, proposals });
    }

    let min_proto_dist = cfg.change_separation + cfg.noise_bits;
    let n_pairs = cfg.n_change + cfg.n_nochange;
    let mut queries = Vec::with_capacity(n_pairs);
    let mut query_proposals = Vec::with_capacity(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    let t = cfg.transform;
    for k in 0..n_pairs {
        let mut rng = rng_for(cfg.seed, PAIR_STREAM + k as u64);
        let s = k % cfg.n_scenes;
        let scene = &scenes[s];
        let is_change = k < cfg.n_change;
        let change_box = if is_change {
            let cw = rng.gen_range((w / 9).max(8)..=(w / 6).max(9)).min(w / 2);
            let ch = rng.gen_range((h / 9).max(8)..=(h / 5).max(9)).min(h / 2);
            let x0 = rng.gen_range(w / 4..=(3 * w / 4 - cw));
            let y0 = rng.gen_range(h / 4..=(3 * h / 4 - ch));
            Some(BoundingBox { x0, y0, x1: x0 + cw, y1: y0 + ch })
        } else {
            None
        };
        let mut keypoints = Vec::new();
        let mut descriptors = Vec::new();
        for (kp, &p) in scene.keypoints.iter().zip(&scene.protos) {
            let q = t.apply(kp);
            let noisy = flip(&prototypes[p], cfg.noise_bits, &mut rng);
            let inside_image = q.x >= 0.0 && q.x < w as f64 && q.y >= 0.0 && q.y < h as f64;
            let occluded = change_box.is_some_and(|b| {
                q.x >= b.x0 as f64 && q.x <= b.x1 as f64 && q.y >= b.y0 as f64 && q.y <= b.y1 as f64
            });
            if inside_image && !occluded {
                keypoints.push(q);
                descriptors.push(noisy);
            }
        }
        let mut proposals: Vec<BoundingBox> = scene.proposals.iter().filter_map(|b| map_box(b, &t, w, h)).collect();
        if let Some(b) = change_box {
            for _ in 0..cfg.change_features {
                let proto = (0..10_000)
                    .map(|_| Descriptor::random(&mut rng, dbits))
                    .find(|c| prototypes.iter().all(|p| c.distance(p) >= min_proto_dist))
                    .ok_or_else(|| {
                        Error::Config(format!("could not place a change prototype {min_proto_dist} bits from the scene"))
                    })?;
                let d = flip(&proto, cfg.noise_bits, &mut rng);
                keypoints.push(point_in(&b, &mut rng));
                descriptors.push(d);
            }
            proposals.push(b);
            for _ in 0..2 {
                proposals.extend(jitter(&b, &mut rng, w, h));
            }
        }
        let id = format!("q{k:04}");
        queries.push(ImageFeatures::new(id.clone(), w, h, keypoints, descriptors)?);
        query_proposals.push((id.clone(), proposals));
        pairs.push(Pair {
            query_id: id,
            ref_id: reference[s].image_id.clone(),
            change_boxes: change_box.into_iter().collect(),
        });
    }

    verify_separation(cfg, &reference, &queries, &pairs)?;
    let ekb = ekb_filler(cfg, &reference)?;
    Ok(SynthDataset {
        config: cfg.clone(),
        reference,
        reference_proposals,
        queries,
        query_proposals,
        pairs,
        ekb,
    })
}

/// Every planted change descriptor is at least `separation - noise` bits
/// from every reference descriptor of the whole map.
fn verify_separation(cfg: &SynthConfig, reference: &[ImageFeatures], queries: &[ImageFeatures], pairs: &[Pair]) -> Result<()> {
    let bound = cfg.change_separation - cfg.noise_bits;
    for (q, p) in queries.iter().zip(pairs) {
        for (d, kp) in q.descriptors.iter().zip(&q.keypoints) {
            if !p.is_hit(kp) {
                continue;
            }
            for r in reference {
                if let Some(x) = r.descriptors.iter().map(|rd| d.distance(rd)).min() {
                    if x < bound {
                        return Err(Error::Integrity(format!(
                            "change feature of {} lies {x} bits from {} (< {bound})",
                            q.image_id, r.image_id
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

fn ekb_filler(cfg: &SynthConfig, reference: &[ImageFeatures]) -> Result<Vec<ImageFeatures>> {
    if cfg.vocab_bits == 0 {
        return Ok(Vec::new());
    }
    let mut seen: HashSet<Descriptor> = reference.iter().flat_map(|r| r.descriptors.iter().cloned()).collect();
    let target = 1usize << cfg.vocab_bits;
    let need = target.saturating_sub(seen.len());
    let mut rng = rng_for(cfg.seed, EKB_STREAM);
    let mut filler = Vec::with_capacity(need);
    while filler.len() < need {
        let d = Descriptor::random(&mut rng, cfg.descriptor_bits);
        if seen.insert(d.clone()) {
            filler.push(d);
        }
    }
    let kp = Keypoint::new(0.5, 0.5);
    filler
        .chunks(DEFAULT_FEATURE_CAP)
        .enumerate()
        .map(|(i, chunk)| ImageFeatures::new(format!("ekb{i:05}"), 1, 1, vec![kp; chunk.len()], chunk.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_scenes: 3,
            n_change: 2,
            n_nochange: 3,
            features_per_image: 60,
            features_per_object: 10,
            vocab_bits: 10,
            ..Default::default()
        }
    }

    #[test]
    fn null_generator_reproduces_reference() {
        let cfg = SynthConfig { n_change: 0, noise_bits: 0, ..small() };
        let ds = synth_generate(&cfg).unwrap();
        for (q, p) in ds.queries.iter().zip(&ds.pairs) {
            let r = ds.reference.iter().find(|r| r.image_id == p.ref_id).unwrap();
            assert_eq!(q.keypoints, r.keypoints);
            assert_eq!(q.descriptors, r.descriptors);
        }
        let rp: ProposalSet = ds.reference_proposals.iter().cloned().collect();
        for (id, boxes) in &ds.query_proposals {
            let pair = ds.pairs.iter().find(|p| &p.query_id == id).unwrap();
            assert_eq!(&rp[&pair.ref_id], boxes);
        }
    }

    #[test]
    fn planted_changes_are_separated() {
        for spread in [Some(48), None] {
            check_separation(&SynthConfig { prototype_spread: spread, ..small() });
        }
    }

    #[test]
    fn scene_prototypes_stay_near_their_base() {
        let ds = synth_generate(&small()).unwrap();
        for r in &ds.reference {
            let d = &r.descriptors;
            let worst = (0..d.len()).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| d[i].distance(&d[j])).max();
            // two prototypes differ by at most 2 * spread, plus noise on each side
            assert!(worst.unwrap() <= 2 * 48 + 2 * 8);
        }
    }

    fn check_separation(cfg: &SynthConfig) {
        let ds = synth_generate(cfg).unwrap();
        let mut planted = 0;
        for (q, p) in ds.queries.iter().zip(&ds.pairs) {
            for (d, kp) in q.descriptors.iter().zip(&q.keypoints) {
                if p.is_hit(kp) {
                    planted += 1;
                    for r in &ds.reference {
                        for rd in &r.descriptors {
                            assert!(d.distance(rd) >= 64 - 8);
                        }
                    }
                }
            }
        }
        assert_eq!(planted, 2 * cfg.change_features);
        for p in &ds.pairs[..2] {
            let b = p.change_boxes[0];
            assert!(b.x0 >= cfg.width / 4 && b.x1 <= 3 * cfg.width / 4);
            assert!(b.y0 >= cfg.height / 4 && b.y1 <= 3 * cfg.height / 4);
        }
    }

    #[test]
    fn pool_is_padded_to_vocabulary_size() {
        let ds = synth_generate(&small()).unwrap();
        let distinct: HashSet<Descriptor> =
            ds.vocabulary_pool().iter().flat_map(|i| i.descriptors.iter().cloned()).collect();
        assert_eq!(distinct.len(), 1 << 10);
    }

    #[test]
    fn seeded_regeneration_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        synth_generate(&small()).unwrap().write(dir_a.path()).unwrap();
        synth_generate(&small()).unwrap().write(dir_b.path()).unwrap();
        for f in [REFERENCE_FILE, QUERY_FILE, ANNOTATIONS_FILE, EKB_FILE, QUERY_PROPOSALS_FILE, CONFIG_FILE] {
            assert_eq!(std::fs::read(dir_a.path().join(f)).unwrap(), std::fs::read(dir_b.path().join(f)).unwrap(), "{f}");
        }
        let other = synth_generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(other.reference, synth_generate(&small()).unwrap().reference);
    }

    #[test]
    fn infeasible_separation() {
        assert!(synth_generate(&SynthConfig { change_separation: 250, ..small() }).is_err());
        assert!(synth_generate(&SynthConfig { change_separation: 15, noise_bits: 8, ..small() }).is_err());
    }
}
