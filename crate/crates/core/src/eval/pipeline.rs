use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{collection_success, Collection, Pair, PooledFeature, SuccessCurve};
use crate::classifier::ClassifierConfig;
use crate::error::{Error, Result};
use crate::feature::ImageFeatures;
use crate::map::{build_place_models, BuildConfig, ImageModel, PlaceModel};
use crate::mining::MiningConfig;
use crate::proposals::{BoundingBox, ProposalSet};
use crate::ranking::{rank_query, QueryRanking, RankedFeature, RankingConfig};
use crate::vocabulary::Vocabulary;

/// Reference images, query images and the annotated pairs between them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub reference: Vec<ImageFeatures>,
    pub reference_proposals: Option<ProposalSet>,
    pub queries: Vec<ImageFeatures>,
    pub query_proposals: Option<ProposalSet>,
    pub pairs: Vec<Pair>,
    ref_index: HashMap<String, usize>,
    query_index: HashMap<String, usize>,
}

impl Dataset {
    /// Checks that every pair names known images.
    pub fn new(
        reference: Vec<ImageFeatures>,
        reference_proposals: Option<ProposalSet>,
        queries: Vec<ImageFeatures>,
        query_proposals: Option<ProposalSet>,
        pairs: Vec<Pair>,
    ) -> Result<Self> {
        let ref_index: HashMap<String, usize> =
            reference.iter().enumerate().map(|(i, f)| (f.image_id.clone(), i)).collect();
        let query_index: HashMap<String, usize> =
            queries.iter().enumerate().map(|(i, f)| (f.image_id.clone(), i)).collect();
        for p in &pairs {
            if !ref_index.contains_key(&p.ref_id) {
                return Err(Error::Lookup(format!("pair references unknown reference image '{}'", p.ref_id)));
            }
            if !query_index.contains_key(&p.query_id) {
                return Err(Error::Lookup(format!("pair references unknown query image '{}'", p.query_id)));
            }
        }
        Ok(Dataset { reference, reference_proposals, queries, query_proposals, pairs, ref_index, query_index })
    }

    pub fn reference_image(&self, id: &str) -> Option<&ImageFeatures> {
        self.ref_index.get(id).map(|&i| &self.reference[i])
    }

    pub fn query_image(&self, id: &str) -> Option<&ImageFeatures> {
        self.query_index.get(id).map(|&i| &self.queries[i])
    }

    pub fn query_boxes(&self, id: &str) -> Option<&[BoundingBox]> {
        self.query_proposals
            .as_ref()
            .map(|set| set.get(id).map(Vec::as_slice).unwrap_or(&[]))
    }
}

/// All knobs of a map build plus ranking run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mining: MiningConfig,
    pub classifier: ClassifierConfig,
    pub build: BuildConfig,
    pub ranking: RankingConfig,
}

impl PipelineConfig {
    pub fn for_width(descriptor_bits: u32) -> Self {
        PipelineConfig {
            mining: MiningConfig::default(),
            classifier: ClassifierConfig::for_width(descriptor_bits),
            build: BuildConfig::default(),
            ranking: RankingConfig::default(),
        }
    }

    /// The part of the config that determines the built map.
    pub fn map_key(&self) -> String {
        serde_json::to_string(&(&self.mining, &self.classifier, &self.build)).expect("config serializes")
    }
}

/// Scored features of one pair.
#[derive(Clone, Debug)]
pub struct PairScores {
    pub pair: usize,
    pub pooled: Vec<PooledFeature>,
    /// Final order; empty for oracle scores.
    pub ranked: Vec<RankedFeature>,
}

/// Decompressed reference models ready to rank queries.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub vocab: Arc<Vocabulary>,
    pub models: Vec<PlaceModel>,
    pub config: PipelineConfig,
    index: HashMap<String, (usize, usize)>,
}

impl Pipeline {
    pub fn build(dataset: &Dataset, vocab: Arc<Vocabulary>, config: PipelineConfig) -> Result<Self> {
        let models = build_place_models(
            &dataset.reference,
            dataset.reference_proposals.as_ref(),
            &vocab,
            &config.mining,
            &config.classifier,
            &config.build,
        )?;
        Self::from_models(models, vocab, config)
    }

    pub fn from_models(models: Vec<PlaceModel>, vocab: Arc<Vocabulary>, config: PipelineConfig) -> Result<Self> {
        let mut index = HashMap::new();
        for (p, m) in models.iter().enumerate() {
            if m.vocab_hash != vocab.hash() {
                return Err(Error::Integrity(format!("place {p} was built with a different vocabulary")));
            }
            for (i, img) in m.images.iter().enumerate() {
                index.insert(img.image_id.clone(), (p, i));
            }
        }
        Ok(Pipeline { vocab, models, config, index })
    }

    pub fn reference_model(&self, id: &str) -> Option<&ImageModel> {
        self.index.get(id).map(|&(p, i)| &self.models[p].images[i])
    }

    /// Cluster count of every reference image, in map order.
    pub fn clusters_per_image(&self) -> Vec<usize> {
        self.models.iter().flat_map(|m| m.images.iter().map(|i| i.clusters.len())).collect()
    }

    pub fn rank(&self, query: &ImageFeatures, proposals: Option<&[BoundingBox]>, ref_id: &str) -> Result<QueryRanking> {
        let model = self
            .reference_model(ref_id)
            .ok_or_else(|| Error::Lookup(format!("reference image '{ref_id}' is not in the map")))?;
        rank_query(query, proposals, model, &self.vocab, &self.config.ranking)
    }

    pub fn score_pair(&self, dataset: &Dataset, pair: usize) -> Result<PairScores> {
        let p = &dataset.pairs[pair];
        let query = dataset
            .query_image(&p.query_id)
            .ok_or_else(|| Error::Lookup(format!("unknown query image '{}'", p.query_id)))?;
        let ranked = self.rank(query, dataset.query_boxes(&p.query_id), &p.ref_id)?.ranked;
        let pooled = ranked
            .iter()
            .map(|f| PooledFeature { key: f.key(), hit: p.is_hit(&query.keypoints[f.index]) })
            .collect();
        Ok(PairScores { pair, pooled, ranked })
    }
}

/// Brute-force reference: each query feature scored by its Hamming
/// distance to the nearest descriptor of the paired reference image.
pub fn oracle_scores(dataset: &Dataset, pair: usize) -> Result<PairScores> {
    let p = &dataset.pairs[pair];
    let query = dataset
        .query_image(&p.query_id)
        .ok_or_else(|| Error::Lookup(format!("unknown query image '{}'", p.query_id)))?;
    let reference = dataset
        .reference_image(&p.ref_id)
        .ok_or_else(|| Error::Lookup(format!("unknown reference image '{}'", p.ref_id)))?;
    let pooled = query
        .descriptors
        .iter()
        .zip(&query.keypoints)
        .map(|(q, kp)| {
            let d = reference.descriptors.iter().map(|r| q.distance(r)).min().unwrap_or(q.width());
            PooledFeature { key: (false, -(d as f64)), hit: p.is_hit(kp) }
        })
        .collect();
    Ok(PairScores { pair, pooled, ranked: Vec::new() })
}

/// Scores every pair used by `collections` once, pools per collection and
/// reduces to a success curve. Collections are reported in id order.
pub fn evaluate<F>(method: &str, collections: &[Collection], score: F) -> Result<(SuccessCurve, Vec<PairScores>)>
where
    F: Fn(usize) -> Result<PairScores> + Sync,
{
    let used: BTreeSet<usize> = collections.iter().flat_map(|c| c.pairs.iter().copied()).collect();
    let scored: Vec<PairScores> = used.into_par_iter().map(&score).collect::<Result<_>>()?;
    let by_pair: HashMap<usize, &PairScores> = scored.iter().map(|s| (s.pair, s)).collect();
    let mut ordered: Vec<&Collection> = collections.iter().collect();
    ordered.sort_by_key(|c| c.id);
    let flags: Vec<[bool; 6]> = ordered
        .par_iter()
        .map(|c| {
            let pooled: Vec<PooledFeature> =
                c.pairs.iter().flat_map(|p| by_pair[p].pooled.iter().copied()).collect();
            collection_success(&pooled)
        })
        .collect();
    Ok((SuccessCurve::from_flags(method, &flags), scored))
}
