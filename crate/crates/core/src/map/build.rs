use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, LiveClassifier};
use crate::error::{Error, Result};
use crate::feature::ImageFeatures;
use crate::mining::{mine_positives, subsample, MiningConfig};
use crate::proposals::{
    cluster_regions_with_keypoints, grid_proposals, select_proposals, BoundingBox, ObjectCluster, ProposalSet,
    DEFAULT_MAX_PROPOSALS, DEFAULT_OVERLAP_THRESH,
};
use crate::vocabulary::{Vocabulary, WordId};

use super::{encode_pose, ClusterModel, CompressedCluster, CompressedRegion, ImageModel, PlaceModel, VisualWord};

pub const DEFAULT_PLACE_LEN: usize = 10;
pub const DEFAULT_NEGATIVE_CAP: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub place_len: usize,
    /// `false` trains a single full-image classifier per reference image.
    pub object_level: bool,
    pub max_proposals: usize,
    pub overlap_thresh: f64,
    pub negative_cap: usize,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            place_len: DEFAULT_PLACE_LEN,
            object_level: true,
            max_proposals: DEFAULT_MAX_PROPOSALS,
            overlap_thresh: DEFAULT_OVERLAP_THRESH,
            negative_cap: DEFAULT_NEGATIVE_CAP,
            seed: 0,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.place_len == 0 {
            return Err(Error::Config("place length must be at least 1".into()));
        }
        if self.negative_cap == 0 {
            return Err(Error::Config("negative cap must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_thresh) {
            return Err(Error::Config("overlap threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Index ranges of consecutive places of length `place_len`.
pub fn partition_places(n_images: usize, place_len: usize) -> Vec<std::ops::Range<usize>> {
    assert!(place_len > 0);
    (0..n_images)
        .step_by(place_len)
        .map(|s| s..(s + place_len).min(n_images))
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn cluster_seed(base: u64, image_index: usize, cluster_id: usize) -> u64 {
    splitmix(splitmix(base ^ splitmix(image_index as u64)) ^ cluster_id as u64)
}

const SUBSAMPLE_SALT: u64 = 0x5bd1_e995_0000_0001;

/// Trains every cluster classifier of one reference image.
///
/// `proposals = None` falls back to a sliding-window grid. Each keypoint
/// is stored once per cluster, under the first region that contains it.
pub fn build_image_model(
    image_index: usize,
    img: &ImageFeatures,
    proposals: Option<&[BoundingBox]>,
    vocab: &Vocabulary,
    mining: &MiningConfig,
    classifier: &ClassifierConfig,
    build: &BuildConfig,
) -> Result<ImageModel> {
    if let Some(w) = img.descriptor_width() {
        if w != vocab.width() {
            return Err(Error::MalformedInput(format!(
                "image {} has {w}-bit descriptors, vocabulary is {}-bit",
                img.image_id,
                vocab.width()
            )));
        }
    }
    let words = vocab.quantize_all(&img.descriptors)?;
    let clusters: Vec<ObjectCluster> = if build.object_level {
        let grid;
        let raw = match proposals {
            Some(p) => p,
            None => {
                grid = grid_proposals(img.width, img.height);
                &grid[..]
            }
        };
        let raw: Vec<BoundingBox> = raw.iter().copied().filter(|b| b.within(img.width, img.height)).collect();
        let regions = select_proposals(&raw, &img.keypoints, build.max_proposals, build.overlap_thresh);
        cluster_regions_with_keypoints(&regions, img.width, img.height, &img.keypoints)
    } else {
        cluster_regions_with_keypoints(&[], img.width, img.height, &img.keypoints)
    };

    let models = clusters
        .par_iter()
        .map(|cl| {
            let seed = cluster_seed(build.seed, image_index, cl.id);
            let mut members: Vec<(usize, usize)> = Vec::new(); // (feature, region)
            for (f, kp) in img.keypoints.iter().enumerate() {
                if let Some(r) = cl.regions.iter().position(|r| r.bbox.contains(kp)) {
                    members.push((f, r));
                }
            }
            if members.is_empty() {
                return Ok(None);
            }
            let members = subsample(&members, build.negative_cap, seed ^ SUBSAMPLE_SALT);
            let mut regions: Vec<CompressedRegion> = cl
                .regions
                .iter()
                .map(|r| CompressedRegion { bbox: r.bbox, words: Vec::new() })
                .collect();
            for &(f, r) in &members {
                let bbox = regions[r].bbox;
                let pose = encode_pose(&bbox, &img.keypoints[f]).expect("member keypoint inside its region");
                regions[r].words.push(VisualWord { appearance: words[f], pose });
            }
            for r in &mut regions {
                r.words.sort_unstable();
            }
            regions.retain(|r| !r.words.is_empty());
            let negatives: Vec<WordId> = regions.iter().flat_map(|r| r.words.iter().map(|w| w.appearance)).collect();
            let positives = mine_positives(vocab, &negatives, &MiningConfig { seed, ..*mining });
            let compressed = CompressedCluster {
                is_background: cl.is_background,
                regions,
                positives,
                config: ClassifierConfig { seed, ..*classifier },
            };
            let classifier: LiveClassifier = compressed.train(vocab)?;
            Ok(Some(ClusterModel { compressed, classifier }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageModel {
        image_id: img.image_id.clone(),
        width: img.width,
        height: img.height,
        clusters: models.into_iter().flatten().collect(),
    })
}

/// Builds the full map: one [`PlaceModel`] per `place_len` reference images.
///
/// `proposals = None` uses grid proposals everywhere; an image missing from
/// a supplied set has no proposals and gets only the background cluster.
pub fn build_place_models(
    reference: &[ImageFeatures],
    proposals: Option<&ProposalSet>,
    vocab: &Vocabulary,
    mining: &MiningConfig,
    classifier: &ClassifierConfig,
    build: &BuildConfig,
) -> Result<Vec<PlaceModel>> {
    build.validate()?;
    mining.validate(vocab.width())?;
    classifier.validate()?;
    let images = reference
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let props = proposals.map(|set| set.get(&img.image_id).map(Vec::as_slice).unwrap_or(&[]));
            build_image_model(i, img, props, vocab, mining, classifier, build)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut images = images.into_iter();
    Ok(partition_places(reference.len(), build.place_len)
        .into_iter()
        .enumerate()
        .map(|(place_id, range)| PlaceModel {
            place_id,
            vocab_hash: vocab.hash(),
            images: images.by_ref().take(range.len()).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_arithmetic() {
        let sizes: Vec<usize> = partition_places(25, 10).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
        assert!(partition_places(0, 10).is_empty());
        assert_eq!(partition_places(10, 10), vec![0..10]);
    }

    #[test]
    fn seeds_differ_per_cluster() {
        assert_ne!(cluster_seed(1, 0, 0), cluster_seed(1, 0, 1));
        assert_ne!(cluster_seed(1, 0, 1), cluster_seed(1, 1, 0));
        assert_eq!(cluster_seed(7, 3, 2), cluster_seed(7, 3, 2));
    }
}
