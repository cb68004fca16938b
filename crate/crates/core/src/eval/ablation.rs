use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;

use super::pipeline::{evaluate, Dataset, Pipeline, PipelineConfig};
use super::{Collection, SuccessCurve};
use crate::classifier::{ClassifierKind, KernelKind};
use crate::error::Result;
use crate::mining::MiningStrategy;
use crate::registration::VisibilityMode;
use crate::vocabulary::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub axis: &'static str,
    pub name: String,
    pub config: PipelineConfig,
}

impl Variant {
    pub fn method(&self) -> String {
        format!("{}:{}", self.axis, self.name)
    }
}

/// Every variant of the four ablation axes, each a copy of `base` with
/// one knob changed.
pub fn ablation_variants(base: &PipelineConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    let mut push = |axis: &'static str, name: &str, f: &dyn Fn(&mut PipelineConfig)| {
        let mut config = *base;
        f(&mut config);
        out.push(Variant { axis, name: name.to_string(), config });
    };

    push("object", "object", &|c| {
        c.build.object_level = true;
        c.ranking.suppression = true;
    });
    push("object", "non-object", &|c| c.build.object_level = false);
    push("object", "non-suppression", &|c| c.ranking.suppression = false);

    push("classifier", "nn", &|c| c.classifier.kind = ClassifierKind::Nn);
    for k in [KernelKind::Linear, KernelKind::Sigmoid, KernelKind::Poly, KernelKind::Rbf] {
        push("classifier", &format!("svm-{k}"), &|c| {
            c.classifier.kind = ClassifierKind::Svm;
            c.classifier.kernel = k;
        });
    }

    for bits in [10, 20, 30] {
        push("mining", &format!("uniform-{bits}"), &|c| {
            c.mining.strategy = MiningStrategy::Uniform;
            c.mining.min_neg_distance = bits;
        });
    }
    push("mining", "farthest", &|c| c.mining.strategy = MiningStrategy::Farthest);
    push("mining", "nearest", &|c| c.mining.strategy = MiningStrategy::Nearest);

    for v in [VisibilityMode::HorizontalVertical, VisibilityMode::Horizontal, VisibilityMode::None] {
        push("visibility", &v.to_string(), &|c| c.ranking.registration.visibility = v);
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationResult {
    pub variant: Variant,
    pub curve: SuccessCurve,
    /// Cluster count per reference image of the map the variant ran on.
    pub clusters_per_image: Vec<usize>,
}

/// Runs every variant on the same collections. Maps are built once per
/// distinct build-relevant config and shared between variants.
pub fn ablate(
    dataset: &Dataset,
    vocab: Arc<Vocabulary>,
    collections: &[Collection],
    variants: &[Variant],
) -> Result<Vec<AblationResult>> {
    let mut maps: HashMap<String, Pipeline> = HashMap::new();
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let key = v.config.map_key();
        if !maps.contains_key(&key) {
            maps.insert(key.clone(), Pipeline::build(dataset, Arc::clone(&vocab), v.config)?);
        }
        let base = &maps[&key];
        let pipe = Pipeline::from_models(base.models.clone(), Arc::clone(&vocab), v.config)?;
        let (curve, _) = evaluate(&v.method(), collections, |p| pipe.score_pair(dataset, p))?;
        out.push(AblationResult { variant: v.clone(), curve, clusters_per_image: pipe.clusters_per_image() });
    }
    Ok(out)
}
