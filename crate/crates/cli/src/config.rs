//! Run configuration: named presets, JSON overrides and validation.

use std::path::{Path, PathBuf};

use m2m_core::attention::{RefinerConfig, RopeConfig, StackConfig};
use m2m_core::datasets::{FeatureProviderConfig, SynthSpec, SyntheticDatasetConfig, WarpSampler};
use m2m_core::evaluation::{AggregationScheme, ThresholdMode};
use m2m_core::flow::FlowParams;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub encoder_lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            encoder_lr: 1e-5,
            steps: 500,
            batch_size: 4,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: ThresholdMode,
    pub alpha: f64,
    pub scheme: AggregationScheme,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            mode: ThresholdMode::Img,
            alpha: 0.1,
            scheme: AggregationScheme::PerKeypointPool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stack: StackConfig,
    pub rope: RopeConfig,
    /// Correlation grid (H, W); the refined grid is (2H, 2W).
    pub grid: (usize, usize),
    pub flow: FlowParams,
    pub optim: OptimConfig,
    pub provider: FeatureProviderConfig,
    /// Pairs scored by PCK after training.
    #[serde(default)]
    pub holdout: Option<FeatureProviderConfig>,
    pub eval: EvalSettings,
    pub out_dir: PathBuf,
}

fn synthetic(seed: u64, n_pairs: usize, grid: usize, image: usize) -> FeatureProviderConfig {
    FeatureProviderConfig::Synthetic(SyntheticDatasetConfig {
        seed,
        n_pairs,
        spec: SynthSpec {
            grid: (grid, grid),
            depth: 16,
            layers: 2,
            n_keypoints: 8,
            image_size: (image, image),
        },
        warp: WarpSampler::Translation { max_shift: 2.0 },
        sigma_feat: 0.05,
    })
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => RunConfig {
                stack: StackConfig::new(4, 8, 4),
                rope: RopeConfig::default(),
                grid: (8, 8),
                flow: FlowParams::default(),
                optim: OptimConfig::default(),
                provider: synthetic(1, 200, 8, 128),
                holdout: Some(synthetic(2, 50, 8, 128)),
                eval: EvalSettings::default(),
                out_dir: PathBuf::from("runs/desk"),
            },
            Preset::Paper => RunConfig {
                grid: (15, 15),
                provider: synthetic(1, 200, 15, 240),
                holdout: Some(synthetic(2, 50, 15, 240)),
                out_dir: PathBuf::from("runs/paper"),
                ..RunConfig::preset(Preset::Desk)
            },
        }
    }

    /// Deep-merges `overrides` over the preset; unknown keys are rejected.
    pub fn with_overrides(preset: Preset, overrides: Option<Value>) -> Result<Self> {
        let mut base = serde_json::to_value(RunConfig::preset(preset))?;
        if let Some(o) = overrides {
            if !o.is_object() {
                return Err(CliError::config("configuration file must hold a JSON object"));
            }
            merge(&mut base, o);
        }
        serde_json::from_value(base).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let overrides = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Some(serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        RunConfig::with_overrides(preset, overrides)
    }

    pub fn refiner_config(&self, channels: usize) -> RefinerConfig {
        RefinerConfig {
            channels,
            grid: self.grid,
            stack: self.stack.clone(),
            rope: self.rope.clone(),
        }
    }

    /// Correlation channels the provider yields, when known without I/O.
    pub fn provider_channels(&self) -> Option<usize> {
        match &self.provider {
            FeatureProviderConfig::Synthetic(s) => Some(s.spec.layers),
            FeatureProviderConfig::Encoder { encoder, .. } => Some(encoder.widths.len()),
            FeatureProviderConfig::File { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: m2m_core::Error| CliError::config(e.to_string());
        self.refiner_config(self.provider_channels().unwrap_or(1)).validate().map_err(wrap)?;
        self.flow.validate().map_err(wrap)?;
        self.provider.validate().map_err(wrap)?;
        if let Some(h) = &self.holdout {
            h.validate().map_err(wrap)?;
            if matches!(h, FeatureProviderConfig::Encoder { .. }) {
                return Err(CliError::config("holdout features are encoded by the training encoder; give its input provider"));
            }
        }
        if let (FeatureProviderConfig::Encoder { input, encoder }, Some(FeatureProviderConfig::Synthetic(s))) =
            (&self.provider, &self.holdout)
        {
            if let FeatureProviderConfig::Synthetic(i) = &**input {
                if i.spec.depth != s.spec.depth || encoder.input_depth != i.spec.depth {
                    return Err(CliError::config("holdout depth must match the encoder input depth"));
                }
            }
        }
        let o = &self.optim;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(o.lr) || !(o.encoder_lr >= 0.0 && o.encoder_lr.is_finite()) {
            return Err(CliError::config("learning rates must be positive"));
        }
        if o.batch_size == 0 {
            return Err(CliError::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !positive(o.eps) {
            return Err(CliError::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if !positive(self.eval.alpha) {
            return Err(CliError::config("eval alpha must be positive"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(CliError::config("out_dir must not be empty"));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() && same_kind(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Tagged objects of different kinds replace each other instead of merging.
fn same_kind(a: &Value, b: &Value) -> bool {
    match (a.get("kind"), b.get("kind")) {
        (Some(x), Some(y)) => x == y,
        _ => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::Paper] {
            RunConfig::preset(p).validate().unwrap();
        }
        let paper = RunConfig::preset(Preset::Paper);
        assert_eq!(paper.grid, (15, 15));
        assert_eq!((paper.stack.n_heads, paper.stack.d_head, paper.stack.d_in), (8, 4, 32));
        assert_eq!((paper.optim.lr, paper.optim.encoder_lr), (1e-3, 1e-5));
    }

    #[test]
    fn overrides_merge_deeply() {
        let cfg = RunConfig::with_overrides(Preset::Desk, Some(json!({"optim": {"steps": 3}, "grid": [4, 4]}))).unwrap();
        assert_eq!(cfg.optim.steps, 3);
        assert_eq!(cfg.optim.batch_size, 4);
        assert_eq!(cfg.grid, (4, 4));
        let file = RunConfig::with_overrides(
            Preset::Desk,
            Some(json!({"provider": {"kind": "file", "data_dir": "d"}})),
        )
        .unwrap();
        assert_eq!(file.provider, FeatureProviderConfig::File { data_dir: "d".into() });
    }

    #[test]
    fn unknown_and_invalid_fields_are_config_errors() {
        let e = RunConfig::with_overrides(Preset::Desk, Some(json!({"optimizer": {}}))).unwrap_err();
        assert_eq!(e.kind(), "config");
        let mut cfg = RunConfig::preset(Preset::Desk);
        cfg.stack.d_head = 3;
        assert!(cfg.validate().is_err());
    }
}
