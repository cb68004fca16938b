use std::path::{Path, PathBuf};

use ccm_core::classifier::{ClassifierConfig, ClassifierKind, KernelKind, KernelParams, DEFAULT_C_REG, DEFAULT_SIGMA_D, DEFAULT_TOL};
use ccm_core::eval::synth::SynthConfig;
use ccm_core::eval::PipelineConfig;
use ccm_core::map::{BuildConfig, DEFAULT_NEGATIVE_CAP, DEFAULT_PLACE_LEN, DEFAULT_WINDOW};
use ccm_core::mining::{MiningConfig, MiningStrategy, DEFAULT_MAX_EXAMPLES, DEFAULT_MIN_NEG_DISTANCE};
use ccm_core::proposals::{DEFAULT_MAX_PROPOSALS, DEFAULT_OVERLAP_THRESH};
use ccm_core::ranking::RankingConfig;
use ccm_core::registration::{RegistrationConfig, TransformModel, VisibilityMode, DEFAULT_DELTA, DEFAULT_MARGIN_FRAC};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub features: Vec<PathBuf>,
    pub queries: Option<PathBuf>,
    pub proposals: Option<PathBuf>,
    pub query_proposals: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trajectory: Option<String>,
}

/// Fully resolved settings of one run. Written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub vocab_bits: u32,
    pub place_len: usize,
    pub window: usize,
    pub delta: f64,
    /// Box expansion as a fraction of the query width.
    pub margin_frac: f64,
    pub transform: TransformModel,
    pub classifier: ClassifierKind,
    pub kernel: KernelKind,
    pub mining: MiningStrategy,
    pub mining_min_bits: u32,
    pub max_positives: usize,
    pub negative_cap: usize,
    pub sigma_d: f64,
    pub svm_c: f64,
    pub svm_tol: f64,
    pub visibility: VisibilityMode,
    pub suppression: bool,
    pub object_level: bool,
    pub max_proposals: usize,
    pub overlap_thresh: f64,
    pub seed: u64,
    pub collection_size: usize,
    pub collections: Option<usize>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            vocab_bits: 16,
            place_len: DEFAULT_PLACE_LEN,
            window: DEFAULT_WINDOW,
            delta: DEFAULT_DELTA,
            margin_frac: DEFAULT_MARGIN_FRAC,
            transform: TransformModel::Linear,
            classifier: ClassifierKind::Svm,
            kernel: KernelKind::Rbf,
            mining: MiningStrategy::Uniform,
            mining_min_bits: DEFAULT_MIN_NEG_DISTANCE,
            max_positives: DEFAULT_MAX_EXAMPLES,
            negative_cap: DEFAULT_NEGATIVE_CAP,
            sigma_d: DEFAULT_SIGMA_D,
            svm_c: DEFAULT_C_REG,
            svm_tol: DEFAULT_TOL,
            visibility: VisibilityMode::HorizontalVertical,
            suppression: true,
            object_level: true,
            max_proposals: DEFAULT_MAX_PROPOSALS,
            overlap_thresh: DEFAULT_OVERLAP_THRESH,
            seed: 0,
            collection_size: 20,
            collections: None,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// TOML, or JSON when the file ends in `.json`. A JSON sidecar written
    /// next to an output is accepted as is.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let bad = |e: String| CliError::new("config", format!("{}: {e}", path.display()));
        if path.extension().is_some_and(|e| e == "json") {
            let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
            if let Some(inner) = v.get_mut("config") {
                v = inner.take();
            }
            serde_json::from_value(v).map_err(|e| bad(e.to_string()))
        } else {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(1..=32).contains(&self.vocab_bits) {
            return Err(CliError::new("config", format!("vocab_bits {} outside 1..=32", self.vocab_bits)));
        }
        if self.collection_size == 0 {
            return Err(CliError::new("config", "collection_size must be at least 1"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        1usize << self.vocab_bits
    }

    /// Pipeline knobs for descriptors `descriptor_bits` wide; validated.
    pub fn pipeline(&self, descriptor_bits: u32) -> Result<PipelineConfig, CliError> {
        let cfg = PipelineConfig {
            mining: MiningConfig {
                strategy: self.mining,
                min_neg_distance: self.mining_min_bits,
                max_examples: self.max_positives,
                seed: self.seed,
            },
            classifier: ClassifierConfig {
                kind: self.classifier,
                kernel: self.kernel,
                params: KernelParams::for_width(descriptor_bits),
                c_reg: self.svm_c,
                tol: self.svm_tol,
                sigma_d: self.sigma_d,
                seed: self.seed,
            },
            build: BuildConfig {
                place_len: self.place_len,
                object_level: self.object_level,
                max_proposals: self.max_proposals,
                overlap_thresh: self.overlap_thresh,
                negative_cap: self.negative_cap,
                seed: self.seed,
            },
            ranking: RankingConfig {
                suppression: self.suppression,
                registration: RegistrationConfig {
                    delta: self.delta,
                    visibility: self.visibility,
                    margin_frac: self.margin_frac,
                    model: self.transform,
                },
                max_proposals: self.max_proposals,
                overlap_thresh: self.overlap_thresh,
            },
        };
        cfg.mining.validate(descriptor_bits)?;
        cfg.classifier.validate()?;
        cfg.build.validate()?;
        cfg.ranking.registration.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("kernel = \"linear\"\nwindow = 3\n[paths]\nvocab = \"v.bin\"\n").unwrap();
        assert_eq!(cfg.kernel, KernelKind::Linear);
        assert_eq!(cfg.window, 3);
        assert_eq!(cfg.paths.vocab, Some(PathBuf::from("v.bin")));
        assert_eq!(cfg.place_len, DEFAULT_PLACE_LEN);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("windw = 3").is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
