//! Checkpoint directories: `manifest.json` plus one tensor file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Refiner;
use super::params::{RefinerConfig, RefinerParams};
use crate::error::{Error, Result};
use crate::tensor::io;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RefinerConfig,
    pub params: Vec<ParamEntry>,
}

fn file_for(name: &str) -> String {
    format!("{name}.tfmf")
}

/// Writes the refiner into `dir`, creating it if needed. Values are stored
/// as 32-bit floats, so a loaded checkpoint saves back to identical bytes.
pub fn save(refiner: &Refiner, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, t) in refiner.params().flat() {
        let file = file_for(&name);
        io::save(&t, &dir.join(&file))?;
        entries.push(ParamEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: refiner.config().clone(),
        params: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    io::write_atomic(&dir.join(MANIFEST_FILE), &json)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint, checking every tensor against both the manifest and
/// the shapes its config implies.
pub fn load(dir: &Path) -> Result<Refiner> {
    let manifest = read_manifest(dir)?;
    manifest.config.validate()?;
    let layout = RefinerParams::build(&manifest.config, |_, shape| shape.to_vec());
    let mut entries = manifest.params.iter();
    let params = layout.try_map(&mut |name, shape: &Vec<usize>| {
        let entry = entries
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("manifest is missing {name}")))?;
        if entry.name != name {
            return Err(Error::Checkpoint(format!(
                "expected parameter {name}, manifest lists {}",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: manifest shape {:?}, config implies {shape:?}",
                entry.shape
            )));
        }
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::Checkpoint(format!("{name}: file {} escapes the checkpoint", entry.file)));
        }
        let t = io::load(&dir.join(&entry.file))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {:?}, config implies {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    })?;
    if let Some(extra) = entries.next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {}", extra.name)));
    }
    Refiner::new(manifest.config, params)
}
