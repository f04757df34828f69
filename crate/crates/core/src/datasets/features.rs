//! Feature stacks on disk: one tensor file per layer plus `manifest.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlation::{FeatureMap, FeatureStack};
use crate::error::{Error, Result};
use crate::tensor::io;

pub const FEATURE_MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: usize,
    pub file: String,
    /// [H, W].
    pub grid: [usize; 2],
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub version: u32,
    /// [width, height] of the source image in pixels.
    pub image_size: [usize; 2],
    pub layers: Vec<LayerEntry>,
}

pub fn save_feature_stack(dir: &Path, stack: &FeatureStack) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(stack.len());
    for map in stack.maps() {
        let file = format!("layer{}.tfmf", map.layer_id);
        io::save(&map.values, &dir.join(&file))?;
        let (h, w) = map.grid();
        layers.push(LayerEntry { layer_id: map.layer_id, file, grid: [h, w], depth: map.depth() });
    }
    let (w, h) = stack.maps()[0].source_size;
    let manifest = FeatureManifest { version: FEATURE_MANIFEST_VERSION, image_size: [w, h], layers };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    io::write_atomic(&dir.join("manifest.json"), &json)
}

pub fn load_feature_stack(dir: &Path) -> Result<FeatureStack> {
    let manifest: FeatureManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != FEATURE_MANIFEST_VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported feature manifest version {}",
            dir.display(),
            manifest.version
        )));
    }
    let [w, h] = manifest.image_size;
    let maps = manifest
        .layers
        .iter()
        .map(|entry| {
            if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
                return Err(Error::invalid(format!("layer file {} escapes {}", entry.file, dir.display())));
            }
            let values = io::load(&dir.join(&entry.file))?;
            let want = [entry.grid[0], entry.grid[1], entry.depth];
            if values.shape() != want {
                return Err(Error::shape("feature layer", &want, values.shape()));
            }
            FeatureMap::new(values, entry.layer_id, (w, h))
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureStack::new(maps)
}
