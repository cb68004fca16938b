//! The compressed map store.
//!
//! A reference sequence is partitioned into equal-length places. Each
//! reference image carries one classifier per object cluster; a cluster is
//! persisted only as its training examples, quantized to visual words:
//! negatives as `<appearance word, pose word>` pairs grouped by owning
//! region, mined positives as bare appearance words. Decompression looks
//! the exemplars up in the vocabulary and retrains deterministically.

mod build;
mod codec;
mod cost;
mod store;

use rayon::prelude::*;

use crate::classifier::{ClassifierConfig, LiveClassifier};
use crate::error::{Error, Result};
use crate::feature::{Descriptor, Keypoint};
use crate::proposals::{pose_bits, BoundingBox};
use crate::vocabulary::{Vocabulary, WordId};

pub use build::{
    build_image_model, build_place_models, partition_places, BuildConfig, DEFAULT_NEGATIVE_CAP, DEFAULT_PLACE_LEN,
};
pub use codec::{
    decode_map, decode_place, encode_cluster, encode_header, encode_map, encode_payload, encode_place, load_map,
    payload_bits, save_map, CompressedMap, MapHeader, MAP_MAGIC,
};
pub use cost::{space_cost, ClusterCost, PlaceCost, SpaceCostReport};
pub use store::{Action, MapStore, SimRow, DEFAULT_WINDOW, KEYPOINT_BITS};

/// Row-major in-region pixel index: `(y - y0) * (x1 - x0) + (x - x0)`.
pub fn encode_pose(bbox: &BoundingBox, kp: &Keypoint) -> Option<u64> {
    if !bbox.contains(kp) {
        return None;
    }
    let px = kp.x.floor() as u64;
    let py = kp.y.floor() as u64;
    Some((py - bbox.y0 as u64) * bbox.width() as u64 + (px - bbox.x0 as u64))
}

/// Inverse of [`encode_pose`] at one-pixel resolution.
pub fn decode_pose(bbox: &BoundingBox, index: u64) -> Result<Keypoint> {
    if index >= bbox.area() {
        return Err(Error::Format(format!("pose word {index} outside region of area {}", bbox.area())));
    }
    let w = bbox.width() as u64;
    Ok(Keypoint::new((bbox.x0 as u64 + index % w) as f64, (bbox.y0 as u64 + index / w) as f64))
}

/// One compressed training example: `<w^a, w^r>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VisualWord {
    pub appearance: WordId,
    pub pose: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedRegion {
    pub bbox: BoundingBox,
    /// Sorted by `(appearance, pose)`.
    pub words: Vec<VisualWord>,
}

impl CompressedRegion {
    pub fn pose_bits(&self) -> u32 {
        pose_bits(&self.bbox)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedCluster {
    pub is_background: bool,
    pub regions: Vec<CompressedRegion>,
    /// Mined positives, in mining order.
    pub positives: Vec<WordId>,
    pub config: ClassifierConfig,
}

impl CompressedCluster {
    pub fn negative_count(&self) -> usize {
        self.regions.iter().map(|r| r.words.len()).sum()
    }

    /// Negative appearance words in storage order.
    pub fn negative_words(&self) -> impl Iterator<Item = WordId> + '_ {
        self.regions.iter().flat_map(|r| r.words.iter().map(|w| w.appearance))
    }

    /// The cluster falls back to NN when mining produced nothing.
    pub fn uses_nn_fallback(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn contains(&self, kp: &Keypoint) -> bool {
        self.regions.iter().any(|r| r.bbox.contains(kp))
    }

    /// Decoded `(appearance word, keypoint)` pairs of the stored negatives.
    pub fn keypoints(&self) -> Result<Vec<(WordId, Keypoint)>> {
        let mut out = Vec::with_capacity(self.negative_count());
        for r in &self.regions {
            for w in &r.words {
                out.push((w.appearance, decode_pose(&r.bbox, w.pose)?));
            }
        }
        Ok(out)
    }

    /// Reproduces the classifier from the stored examples.
    pub fn train(&self, vocab: &Vocabulary) -> Result<LiveClassifier> {
        let negatives: Vec<Descriptor> = self
            .negative_words()
            .map(|w| vocab.lookup(w))
            .collect::<Result<_>>()?;
        let positives: Vec<Descriptor> = self.positives.iter().map(|&w| vocab.lookup(w)).collect::<Result<_>>()?;
        LiveClassifier::train(&positives, &negatives, &self.config)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub clusters: Vec<CompressedCluster>,
}

impl CompressedImage {
    /// Distinct stored `(word, keypoint)` pairs across all clusters, sorted.
    pub fn words_and_keypoints(&self) -> Result<Vec<(WordId, Keypoint)>> {
        let mut all = Vec::new();
        for c in &self.clusters {
            all.extend(c.keypoints()?);
        }
        all.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.1.y.total_cmp(&b.1.y))
                .then(a.1.x.total_cmp(&b.1.x))
        });
        all.dedup();
        Ok(all)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedPlace {
    pub place_id: usize,
    pub vocab_hash: [u8; 32],
    pub images: Vec<CompressedImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub compressed: CompressedCluster,
    pub classifier: LiveClassifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageModel {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub clusters: Vec<ClusterModel>,
}

impl ImageModel {
    pub fn compressed(&self) -> CompressedImage {
        CompressedImage {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            clusters: self.clusters.iter().map(|c| c.compressed.clone()).collect(),
        }
    }
}

/// A decompressed place: word sets plus live classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaceModel {
    pub place_id: usize,
    pub vocab_hash: [u8; 32],
    pub images: Vec<ImageModel>,
}

impl PlaceModel {
    pub fn image(&self, image_id: &str) -> Option<&ImageModel> {
        self.images.iter().find(|i| i.image_id == image_id)
    }
}

/// Drops live classifiers, keeping only word sets and configs.
pub fn compress_place(m: PlaceModel) -> CompressedPlace {
    CompressedPlace {
        place_id: m.place_id,
        vocab_hash: m.vocab_hash,
        images: m.images.iter().map(ImageModel::compressed).collect(),
    }
}

/// Looks up exemplars and retrains every cluster classifier.
pub fn decompress_place(c: &CompressedPlace, vocab: &Vocabulary) -> Result<PlaceModel> {
    if c.vocab_hash != vocab.hash() {
        return Err(Error::Integrity(format!(
            "place {} was built with vocabulary {} but {} was supplied",
            c.place_id,
            hex::encode(&c.vocab_hash[..8]),
            hex::encode(&vocab.hash()[..8])
        )));
    }
    let images = c
        .images
        .iter()
        .map(|img| {
            let clusters = img
                .clusters
                .par_iter()
                .map(|cc| {
                    Ok(ClusterModel {
                        classifier: cc.train(vocab)?,
                        compressed: cc.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageModel {
                image_id: img.image_id.clone(),
                width: img.width,
                height: img.height,
                clusters,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PlaceModel {
        place_id: c.place_id,
        vocab_hash: c.vocab_hash,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pose_round_trip(x0 in 0u32..500, y0 in 0u32..500, w in 1u32..300, h in 1u32..300, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let b = BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap();
            let kp = Keypoint::new(x0 as f64 + fx * w as f64, y0 as f64 + fy * h as f64);
            prop_assume!(b.contains(&kp));
            let idx = encode_pose(&b, &kp).unwrap();
            prop_assert!(idx < b.area());
            prop_assert!(idx < 1u64 << pose_bits(&b));
            let back = decode_pose(&b, idx).unwrap();
            prop_assert!(b.contains(&back));
            prop_assert_eq!(back.x, kp.x.floor());
            prop_assert_eq!(back.y, kp.y.floor());
        }
    }

    #[test]
    fn pose_outside_region() {
        let b = BoundingBox::new(10, 10, 20, 20).unwrap();
        assert_eq!(encode_pose(&b, &Keypoint::new(20.0, 15.0)), None);
        assert!(decode_pose(&b, 100).is_err());
        assert_eq!(encode_pose(&b, &Keypoint::new(12.5, 11.0)), Some(12));
    }
}
