//! Keypoint-pair annotation records and their JSON files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyLevel {
    Easy = 0,
    Medium = 1,
    Hard = 2,
}

/// Difficulty types in report order.
pub const DIFFICULTY_TYPES: [&str; 4] = ["viewpoint", "scale", "truncation", "occlusion"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyLabels {
    pub viewpoint: DifficultyLevel,
    pub scale: DifficultyLevel,
    pub truncation: DifficultyLevel,
    pub occlusion: DifficultyLevel,
}

impl DifficultyLabels {
    pub fn uniform(level: DifficultyLevel) -> Self {
        DifficultyLabels {
            viewpoint: level,
            scale: level,
            truncation: level,
            occlusion: level,
        }
    }
}

/// One annotated image pair. Sizes are [width, height] and boxes
/// [x0, y0, x1, y1], all in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointPairSet {
    pub pair_id: String,
    pub category: String,
    pub src_img_size: [f64; 2],
    pub tgt_img_size: [f64; 2],
    pub src_bbox: [f64; 4],
    pub tgt_bbox: [f64; 4],
    pub src_kps: Vec<[f64; 2]>,
    pub tgt_kps: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<DifficultyLabels>,
}

fn check_image(size: [f64; 2], bbox: [f64; 4], kps: &[[f64; 2]], side: &str) -> Result<(), String> {
    let [w, h] = size;
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(format!("{side} image size {size:?} must be positive"));
    }
    let [x0, y0, x1, y1] = bbox;
    if !(0.0 <= x0 && x0 <= x1 && x1 <= w && 0.0 <= y0 && y0 <= y1 && y1 <= h) {
        return Err(format!("{side} bbox {bbox:?} is not inside the {w}x{h} image"));
    }
    for (m, &[x, y]) in kps.iter().enumerate() {
        if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
            return Err(format!("{side} keypoint {m} at ({x}, {y}) is outside the {w}x{h} image"));
        }
    }
    Ok(())
}

impl KeypointPairSet {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidAnnotation {
            pair_id: self.pair_id.clone(),
            reason,
        };
        if self.src_kps.len() != self.tgt_kps.len() {
            return Err(fail(format!(
                "{} source keypoints but {} target keypoints",
                self.src_kps.len(),
                self.tgt_kps.len()
            )));
        }
        if self.src_kps.is_empty() {
            return Err(fail("no keypoints".into()));
        }
        check_image(self.src_img_size, self.src_bbox, &self.src_kps, "source").map_err(fail)?;
        check_image(self.tgt_img_size, self.tgt_bbox, &self.tgt_kps, "target").map_err(fail)?;
        Ok(())
    }

    pub fn src_points(&self) -> Vec<(f64, f64)> {
        self.src_kps.iter().map(|p| (p[0], p[1])).collect()
    }

    pub fn tgt_points(&self) -> Vec<(f64, f64)> {
        self.tgt_kps.iter().map(|p| (p[0], p[1])).collect()
    }
}

/// Parses and validates an annotation array; JSON errors carry line and column.
pub fn parse_annotations(text: &str) -> Result<Vec<KeypointPairSet>> {
    let pairs: Vec<KeypointPairSet> = serde_json::from_str(text)?;
    for (i, p) in pairs.iter().enumerate() {
        p.validate()?;
        if pairs[..i].iter().any(|o| o.pair_id == p.pair_id) {
            return Err(Error::InvalidAnnotation {
                pair_id: p.pair_id.clone(),
                reason: "duplicate pair id".into(),
            });
        }
    }
    Ok(pairs)
}

pub fn load_annotations(path: &Path) -> Result<Vec<KeypointPairSet>> {
    parse_annotations(&fs::read_to_string(path)?)
}

pub fn save_annotations(path: &Path, pairs: &[KeypointPairSet]) -> Result<()> {
    for p in pairs {
        p.validate()?;
    }
    let mut json = serde_json::to_vec_pretty(pairs)?;
    json.push(b'\n');
    write_atomic(path, &json)
}
