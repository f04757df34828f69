//! Annotation and feature ingestion, synthetic pairs with exact ground truth
//! and the pluggable feature providers.

mod annotations;
mod encoder;
mod features;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use annotations::{
    load_annotations, parse_annotations, save_annotations, DifficultyLabels, DifficultyLevel,
    KeypointPairSet, DIFFICULTY_TYPES,
};
pub use encoder::{encoder_forward, encoder_forward_var, EncoderConfig, EncoderParams};
pub use features::{load_feature_stack, save_feature_stack, FeatureManifest, LayerEntry, FEATURE_MANIFEST_VERSION};
pub use synth::{
    magnitude_labels, synth_pair, Affine2, SynthPair, SynthSpec, SyntheticDatasetConfig, WarpKind,
    WarpSampler, WarpSpec, MIN_WARP_DET,
};

use crate::correlation::FeatureStack;
use crate::error::{Error, Result};

/// Pixel coordinates → grid coordinates for an image of `image_size`
/// (width, height) seen through a (H, W) grid.
pub fn pixel_to_grid(p: (f64, f64), image_size: (f64, f64), grid: (usize, usize)) -> (f64, f64) {
    (p.0 * grid.1 as f64 / image_size.0, p.1 * grid.0 as f64 / image_size.1)
}

pub fn grid_to_pixel(g: (f64, f64), image_size: (f64, f64), grid: (usize, usize)) -> (f64, f64) {
    (g.0 * image_size.0 / grid.1 as f64, g.1 * image_size.1 / grid.0 as f64)
}

/// Where the features of a dataset come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureProviderConfig {
    /// `annotations.json` plus `features/<pair_id>/{src,tgt}/` stacks.
    File { data_dir: PathBuf },
    Synthetic(SyntheticDatasetConfig),
    /// A trainable encoder applied to the first layer of another provider.
    Encoder { input: Box<FeatureProviderConfig>, encoder: EncoderConfig },
}

impl FeatureProviderConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            FeatureProviderConfig::File { .. } => Ok(()),
            FeatureProviderConfig::Synthetic(cfg) => cfg.validate(),
            FeatureProviderConfig::Encoder { input, encoder } => {
                if matches!(**input, FeatureProviderConfig::Encoder { .. }) {
                    return Err(Error::invalid("encoders cannot be nested"));
                }
                encoder.validate()?;
                input.validate()
            }
        }
    }
}

/// Features and annotation of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairData {
    pub pair: KeypointPairSet,
    pub source: FeatureStack,
    pub target: FeatureStack,
}

pub fn features_dir(data_dir: &Path, pair_id: &str) -> PathBuf {
    data_dir.join("features").join(pair_id)
}

/// Loads every pair of a file-backed dataset.
pub fn load_dataset(data_dir: &Path) -> Result<Vec<PairData>> {
    load_annotations(&data_dir.join("annotations.json"))?
        .into_iter()
        .map(|pair| {
            let dir = features_dir(data_dir, &pair.pair_id);
            Ok(PairData {
                source: load_feature_stack(&dir.join("src"))?,
                target: load_feature_stack(&dir.join("tgt"))?,
                pair,
            })
        })
        .collect()
}

pub fn save_dataset(data_dir: &Path, pairs: &[PairData]) -> Result<()> {
    for p in pairs {
        if p.pair.pair_id.contains(['/', '\\']) || p.pair.pair_id.starts_with('.') {
            return Err(Error::InvalidAnnotation {
                pair_id: p.pair.pair_id.clone(),
                reason: "pair id is not a plain file name".into(),
            });
        }
    }
    std::fs::create_dir_all(data_dir)?;
    for p in pairs {
        let dir = features_dir(data_dir, &p.pair.pair_id);
        save_feature_stack(&dir.join("src"), &p.source)?;
        save_feature_stack(&dir.join("tgt"), &p.target)?;
    }
    let anns: Vec<KeypointPairSet> = pairs.iter().map(|p| p.pair.clone()).collect();
    save_annotations(&data_dir.join("annotations.json"), &anns)
}

impl From<SynthPair> for PairData {
    fn from(p: SynthPair) -> Self {
        PairData { pair: p.pair, source: p.source, target: p.target }
    }
}

/// Base features of a provider; for the encoder kind these are its inputs.
pub fn provide_pairs(cfg: &FeatureProviderConfig) -> Result<Vec<PairData>> {
    cfg.validate()?;
    match cfg {
        FeatureProviderConfig::File { data_dir } => load_dataset(data_dir),
        FeatureProviderConfig::Synthetic(s) => Ok(s.generate()?.into_iter().map(PairData::from).collect()),
        FeatureProviderConfig::Encoder { input, .. } => provide_pairs(input),
    }
}
