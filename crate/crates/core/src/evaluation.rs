//! Percentage of correct keypoints with image, bounding-box and
//! keypoint-extent reference sizes, plus per-category aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Img,
    Bbox,
    BboxKp,
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img" => Ok(ThresholdMode::Img),
            "bbox" => Ok(ThresholdMode::Bbox),
            "bbox_kp" | "bbox-kp" => Ok(ThresholdMode::BboxKp),
            other => Err(Error::invalid(format!("unknown threshold mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalThreshold {
    pub mode: ThresholdMode,
    pub alpha: f64,
}

impl EvalThreshold {
    pub fn new(mode: ThresholdMode, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        Ok(EvalThreshold { mode, alpha })
    }
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Per-keypoint correctness: ‖p − g‖ ≤ α·max(w, h).
pub fn correct_flags(
    predicted: &[(f64, f64)],
    ground_truth: &[(f64, f64)],
    ref_size: (f64, f64),
    alpha: f64,
) -> Result<Vec<bool>> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth keypoints",
            predicted.len(),
            ground_truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Empty("keypoint list"));
    }
    if !(ref_size.0 > 0.0 && ref_size.1 > 0.0) {
        return Err(Error::invalid(format!("reference size {ref_size:?} must be positive")));
    }
    let threshold = alpha * ref_size.0.max(ref_size.1);
    Ok(predicted
        .iter()
        .zip(ground_truth)
        .map(|(&p, &g)| distance(p, g) <= threshold)
        .collect())
}

pub fn pck(
    predicted: &[(f64, f64)],
    ground_truth: &[(f64, f64)],
    ref_size: (f64, f64),
    alpha: f64,
) -> Result<f64> {
    let flags = correct_flags(predicted, ground_truth, ref_size, alpha)?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Tight (width, height) extent of a keypoint set.
pub fn keypoint_extent(keypoints: &[(f64, f64)]) -> Result<(f64, f64)> {
    let first = keypoints.first().ok_or(Error::Empty("keypoint list"))?;
    let (mut x0, mut y0, mut x1, mut y1) = (first.0, first.1, first.0, first.1);
    for &(x, y) in keypoints {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    Ok((x1 - x0, y1 - y0))
}

/// Reference size (w_τ, h_τ) for a threshold mode. Errors on a degenerate
/// reference, i.e. one whose larger side is zero.
pub fn resolve_reference_size(
    mode: ThresholdMode,
    image_size: (f64, f64),
    bbox: (f64, f64, f64, f64),
    keypoint_extent: (f64, f64),
) -> Result<(f64, f64)> {
    let size = match mode {
        ThresholdMode::Img => image_size,
        ThresholdMode::Bbox => {
            let (x0, y0, x1, y1) = bbox;
            if x0 < 0.0 || y0 < 0.0 || x1 > image_size.0 || y1 > image_size.1 || x1 < x0 || y1 < y0 {
                return Err(Error::invalid(format!(
                    "bbox {bbox:?} is not inside the {image_size:?} image"
                )));
            }
            (x1 - x0, y1 - y0)
        }
        ThresholdMode::BboxKp => keypoint_extent,
    };
    if !(size.0.max(size.1) > 0.0) {
        return Err(Error::invalid(format!("degenerate {mode:?} reference size {size:?}")));
    }
    Ok(size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEvalRecord {
    pub pair_id: String,
    pub category: String,
    pub correct: Vec<bool>,
    pub pck: f64,
    pub threshold_pixels: f64,
}

impl PairEvalRecord {
    pub fn new(
        pair_id: impl Into<String>,
        category: impl Into<String>,
        predicted: &[(f64, f64)],
        ground_truth: &[(f64, f64)],
        ref_size: (f64, f64),
        alpha: f64,
    ) -> Result<Self> {
        let correct = correct_flags(predicted, ground_truth, ref_size, alpha)?;
        let pck = correct.iter().filter(|&&f| f).count() as f64 / correct.len() as f64;
        Ok(PairEvalRecord {
            pair_id: pair_id.into(),
            category: category.into(),
            correct,
            pck,
            threshold_pixels: alpha * ref_size.0.max(ref_size.1),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationScheme {
    PerPairMean,
    #[default]
    PerKeypointPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub category: String,
    pub n_pairs: usize,
    pub n_keypoints: usize,
    pub pck: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub scheme: AggregationScheme,
    /// Per-category rows in lexical order, then the `all` row.
    pub rows: Vec<ReportRow>,
}

pub const ALL_CATEGORY: &str = "all";

impl PckReport {
    pub fn overall(&self) -> &ReportRow {
        self.rows.last().expect("report always has an all row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,n_pairs,n_keypoints,pck\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.category, r.n_pairs, r.n_keypoints, r.pck);
        }
        out
    }
}

fn summarize(category: &str, records: &[&PairEvalRecord], scheme: AggregationScheme) -> ReportRow {
    let n_keypoints: usize = records.iter().map(|r| r.correct.len()).sum();
    let pck = match scheme {
        AggregationScheme::PerPairMean => {
            records.iter().map(|r| r.pck).sum::<f64>() / records.len() as f64
        }
        AggregationScheme::PerKeypointPool => {
            let hits: usize = records.iter().map(|r| r.correct.iter().filter(|&&f| f).count()).sum();
            hits as f64 / n_keypoints as f64
        }
    };
    ReportRow {
        category: category.to_string(),
        n_pairs: records.len(),
        n_keypoints,
        pck,
    }
}

pub fn aggregate(records: &[PairEvalRecord], scheme: AggregationScheme) -> Result<PckReport> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let mut by_category: BTreeMap<&str, Vec<&PairEvalRecord>> = BTreeMap::new();
    for r in records {
        by_category.entry(r.category.as_str()).or_default().push(r);
    }
    let mut rows: Vec<ReportRow> = by_category
        .iter()
        .map(|(cat, rs)| summarize(cat, rs, scheme))
        .collect();
    let all: Vec<&PairEvalRecord> = records.iter().collect();
    rows.push(summarize(ALL_CATEGORY, &all, scheme));
    Ok(PckReport { scheme, rows })
}

/// Transferred keypoints of one pair, in target-image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub pair_id: String,
    pub tgt_kps: Vec<[f64; 2]>,
    /// Indices of keypoints that hit the soft-sampler fallback.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fallback: Vec<usize>,
}

pub fn parse_predictions(text: &str) -> Result<Vec<PairPrediction>> {
    let preds: Vec<PairPrediction> = serde_json::from_str(text)?;
    for (i, p) in preds.iter().enumerate() {
        if preds[..i].iter().any(|o| o.pair_id == p.pair_id) {
            return Err(Error::invalid(format!("duplicate prediction for pair {}", p.pair_id)));
        }
        if p.tgt_kps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("pair {} has non-finite predictions", p.pair_id)));
        }
    }
    Ok(preds)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PairPrediction>> {
    parse_predictions(&std::fs::read_to_string(path)?)
}

pub fn predictions_to_json(preds: &[PairPrediction]) -> Result<Vec<u8>> {
    let mut json = serde_json::to_vec_pretty(preds)?;
    json.push(b'\n');
    Ok(json)
}
