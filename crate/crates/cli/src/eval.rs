//! Scores predictions against annotations.

use std::collections::BTreeMap;

use m2m_core::datasets::KeypointPairSet;
use m2m_core::evaluation::{
    aggregate, keypoint_extent, resolve_reference_size, EvalThreshold, PairEvalRecord,
    PairPrediction, PckReport,
};

use crate::config::EvalSettings;
use crate::error::{CliError, Result};

fn points(kps: &[[f64; 2]]) -> Vec<(f64, f64)> {
    kps.iter().map(|&[x, y]| (x, y)).collect()
}

/// Every prediction id must have an annotation and vice versa; otherwise the
/// offending ids are listed in sorted order.
pub fn score_predictions(
    preds: &[PairPrediction],
    anns: &[KeypointPairSet],
    settings: &EvalSettings,
) -> Result<PckReport> {
    let threshold = EvalThreshold::new(settings.mode, settings.alpha)?;
    let by_id: BTreeMap<&str, &KeypointPairSet> = anns.iter().map(|a| (a.pair_id.as_str(), a)).collect();
    let pred_ids: BTreeMap<&str, &PairPrediction> = preds.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let mut unmatched: Vec<String> = pred_ids
        .keys()
        .filter(|id| !by_id.contains_key(*id))
        .chain(by_id.keys().filter(|id| !pred_ids.contains_key(*id)))
        .map(|s| s.to_string())
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(CliError::UnmatchedIds(unmatched));
    }
    let mut records = Vec::with_capacity(anns.len());
    for (id, ann) in &by_id {
        let pred = pred_ids[id];
        let gt = points(&ann.tgt_kps);
        let [w, h] = ann.tgt_img_size;
        let [x0, y0, x1, y1] = ann.tgt_bbox;
        let reference = resolve_reference_size(
            threshold.mode,
            (w, h),
            (x0, y0, x1, y1),
            keypoint_extent(&gt)?,
        )?;
        records.push(PairEvalRecord::new(
            ann.pair_id.clone(),
            ann.category.clone(),
            &points(&pred.tgt_kps),
            &gt,
            reference,
            threshold.alpha,
        )?);
    }
    Ok(aggregate(&records, settings.scheme)?)
}
