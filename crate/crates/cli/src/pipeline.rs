//! One pair through the whole model: correlation, refinement, flow and
//! keypoint transfer, in grid or pixel units.

use m2m_core::attention::{Refiner, RefinerParams};
use m2m_core::correlation::{
    assemble_multichannel_var, correlate_stacks, cosine_correlation_var, FeatureStack,
    MultiChannelCorrelation,
};
use m2m_core::datasets::{encoder_forward_var, grid_to_pixel, pixel_to_grid, EncoderParams, PairData};
use m2m_core::evaluation::PairPrediction;
use m2m_core::flow::{
    flow_var, kernel_softargmax_var, matching_loss_var, points_to_tensor, transfer_keypoints_var,
    FlowParams,
};
use m2m_core::{Error, Result, Tensor, Var};

/// A pair with keypoints converted to refined-grid units and, when the
/// features are fixed, its correlation computed once.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub data: PairData,
    pub correlation: Option<MultiChannelCorrelation>,
    pub src_grid_kps: Vec<(f64, f64)>,
    pub tgt_grid_kps: Tensor,
}

fn size(s: [f64; 2]) -> (f64, f64) {
    (s[0], s[1])
}

pub fn refined_grid(grid: (usize, usize)) -> (usize, usize) {
    (2 * grid.0, 2 * grid.1)
}

impl PreparedPair {
    pub fn new(data: PairData, grid: (usize, usize), precompute: bool) -> Result<Self> {
        let fine = refined_grid(grid);
        let p = &data.pair;
        let src_grid_kps = p
            .src_points()
            .into_iter()
            .map(|k| pixel_to_grid(k, size(p.src_img_size), fine))
            .collect();
        let tgt: Vec<_> = p
            .tgt_points()
            .into_iter()
            .map(|k| pixel_to_grid(k, size(p.tgt_img_size), fine))
            .collect();
        let correlation = if precompute {
            Some(correlate_stacks(&data.source, &data.target, grid)?)
        } else {
            None
        };
        Ok(PreparedPair {
            tgt_grid_kps: points_to_tensor(&tgt)?,
            src_grid_kps,
            correlation,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.source.len()
    }
}

/// Encoded per-layer correlations of a pair, on the tape.
pub fn encoded_correlation(
    source: &FeatureStack,
    target: &FeatureStack,
    encoder: &EncoderParams<Var>,
    grid: (usize, usize),
) -> Result<Var> {
    let src = encoder_forward_var(&Var::constant(source.maps()[0].values.clone()), encoder)?;
    let tgt = encoder_forward_var(&Var::constant(target.maps()[0].values.clone()), encoder)?;
    let corrs = src
        .iter()
        .zip(&tgt)
        .map(|(a, b)| cosine_correlation_var(a, b))
        .collect::<Result<Vec<_>>>()?;
    assemble_multichannel_var(&corrs, grid)
}

pub fn correlation_var(pair: &PreparedPair, encoder: Option<&EncoderParams<Var>>, grid: (usize, usize)) -> Result<Var> {
    match (encoder, &pair.correlation) {
        (Some(enc), _) => encoded_correlation(&pair.data.source, &pair.data.target, enc, grid),
        (None, Some(c)) => Ok(Var::constant(c.values.clone())),
        (None, None) => Err(Error::InvalidArgument("pair has no precomputed correlation".into())),
    }
}

/// Refined map → (H̄, W̄, 2) flow and (M, 2) transferred source keypoints.
pub fn forward_pair(
    refiner: &Refiner,
    params: &RefinerParams<Var>,
    corr: &Var,
    pair: &PreparedPair,
    flow: &FlowParams,
) -> Result<(Var, Var, Vec<bool>)> {
    let refined = refiner.forward(corr, params)?;
    let c_norm = kernel_softargmax_var(&refined, flow.sigma, flow.temperature)?;
    let field = flow_var(&c_norm)?;
    let (pred, fallbacks) = transfer_keypoints_var(&field, &pair.src_grid_kps, flow.tau_dist)?;
    Ok((field, pred, fallbacks))
}

pub fn pair_loss(
    refiner: &Refiner,
    params: &RefinerParams<Var>,
    corr: &Var,
    pair: &PreparedPair,
    flow: &FlowParams,
) -> Result<Var> {
    let (_, pred, _) = forward_pair(refiner, params, corr, pair, flow)?;
    matching_loss_var(&pred, &pair.tgt_grid_kps, flow.loss_norm)
}

/// Inference: target-pixel predictions and the (H̄, W̄, 2) flow in grid units.
pub fn predict(
    refiner: &Refiner,
    encoder: Option<&EncoderParams<Tensor>>,
    pair: &PreparedPair,
    flow: &FlowParams,
) -> Result<(PairPrediction, Tensor)> {
    let grid = refiner.config().grid;
    let enc = encoder.map(EncoderParams::to_constants);
    let corr = correlation_var(pair, enc.as_ref(), grid)?;
    let (field, pred, fallbacks) = forward_pair(refiner, &refiner.params().to_constants(), &corr, pair, flow)?;
    let fine = refined_grid(grid);
    let tgt_size = size(pair.data.pair.tgt_img_size);
    let tgt_kps = pred
        .value()
        .data()
        .chunks(2)
        .map(|g| {
            let (x, y) = grid_to_pixel((g[0], g[1]), tgt_size, fine);
            [x, y]
        })
        .collect();
    let prediction = PairPrediction {
        pair_id: pair.data.pair.pair_id.clone(),
        tgt_kps,
        fallback: fallbacks.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect(),
    };
    Ok((prediction, field.value().clone()))
}
