//! Dense flow from a refined correlation map: kernel soft-argmax
//! normalization, expected target coordinates, soft-sampled keypoint
//! transfer and the matching loss.
//!
//! Coordinates are grid units with x = column and y = row, origin 0, stride 1.

use serde::{Deserialize, Serialize};

use crate::correlation::Correlation4D;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Tolerance of the per-slice simplex check.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    #[default]
    Squared,
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Gaussian kernel width in grid cells.
    pub sigma: f64,
    pub temperature: f64,
    /// Soft-sampler radius in grid cells.
    pub tau_dist: f64,
    #[serde(default)]
    pub loss_norm: LossNorm,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            sigma: 5.0,
            temperature: 0.02,
            tau_dist: 1.5,
            loss_norm: LossNorm::Squared,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma", self.sigma),
            ("temperature", self.temperature),
            ("tau_dist", self.tau_dist),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-source-position distributions over target positions.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCorrelation {
    pub values: Tensor,
    pub kernel_sigma: f64,
    pub softmax_temperature: f64,
}

impl NormalizedCorrelation {
    /// Checks that every source slice is a simplex to [`SIMPLEX_TOL`].
    pub fn check_simplex(values: &Tensor) -> Result<()> {
        let (h, w) = grid_of(values.shape())?;
        let n = h * w;
        for (index, row) in values.data().chunks(n).enumerate() {
            let sum: f64 = row.iter().sum();
            let in_range = row.iter().all(|&v| (-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v));
            if !in_range || (sum - 1.0).abs() > SIMPLEX_TOL || !sum.is_finite() {
                return Err(Error::SimplexViolation { index, sum });
            }
        }
        Ok(())
    }
}

/// Source grid coordinates and their predicted target coordinates, both (H, W, 2)
/// holding (x, y).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub source_grid: Tensor,
    pub predicted: Tensor,
}

impl FlowField {
    pub fn grid(&self) -> (usize, usize) {
        (self.predicted.shape()[0], self.predicted.shape()[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftSamplerWeights {
    /// (H, W) weights over grid points.
    pub values: Tensor,
    pub keypoint: (f64, f64),
    pub tau_dist: f64,
    /// Set when no grid point lay within `tau_dist` and the nearest point
    /// received all the weight.
    pub fallback: bool,
}

fn grid_of(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[h, w, h2, w2] if h == h2 && w == w2 => Ok((h, w)),
        s => Err(Error::invalid(format!("expected (H, W, H, W), got {s:?}"))),
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// (N, N) Gaussian modulation: row r is centred on the argmax of row r of
/// `c` (lowest index on ties).
fn argmax_kernel(c: &Tensor, w: usize, sigma: f64) -> Tensor {
    let n = c.shape()[1];
    let mut g = Vec::with_capacity(n * n);
    let denom = 2.0 * sigma * sigma;
    for row in c.data().chunks(n) {
        let mut best = 0;
        for (idx, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = idx;
            }
        }
        let (pk, pl) = ((best / w) as f64, (best % w) as f64);
        for idx in 0..n {
            let (k, l) = ((idx / w) as f64, (idx % w) as f64);
            g.push((-((k - pk).powi(2) + (l - pl).powi(2)) / denom).exp());
        }
    }
    Tensor::new(&[n, n], g).expect("kernel shape")
}

/// Differentiable kernel soft-argmax over a (H, W, H, W) map. The argmax,
/// and with it the Gaussian, is piecewise constant and carries no gradient.
pub fn kernel_softargmax_var(c: &Var, sigma: f64, temperature: f64) -> Result<Var> {
    check_positive("sigma", sigma)?;
    check_positive("temperature", temperature)?;
    let (h, w) = grid_of(c.shape())?;
    let n = h * w;
    let flat = c.reshape(&[n, n])?;
    let g = Var::constant(argmax_kernel(flat.value(), w, sigma));
    flat.mul(&g)?
        .scale(1.0 / temperature)
        .softmax(1)?
        .reshape(&[h, w, h, w])
}

pub fn kernel_softargmax(
    c_out: &Correlation4D,
    sigma: f64,
    temperature: f64,
) -> Result<NormalizedCorrelation> {
    let out = kernel_softargmax_var(&Var::constant(c_out.values.clone()), sigma, temperature)?;
    Ok(NormalizedCorrelation {
        values: out.value().clone(),
        kernel_sigma: sigma,
        softmax_temperature: temperature,
    })
}

/// (H·W, 2) matrix of grid coordinates (x = column, y = row) in flattening order.
pub fn grid_coordinates(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h * w, 2], |i| {
        let p = i[0];
        if i[1] == 0 {
            (p % w) as f64
        } else {
            (p / w) as f64
        }
    })
}

/// Expected target coordinate under every source slice, as (H, W, 2).
pub fn flow_var(c_norm: &Var) -> Result<Var> {
    let (h, w) = grid_of(c_norm.shape())?;
    let n = h * w;
    c_norm
        .reshape(&[n, n])?
        .matmul(&Var::constant(grid_coordinates(h, w)))?
        .reshape(&[h, w, 2])
}

pub fn flow_from_correlation(c_norm: &NormalizedCorrelation) -> Result<FlowField> {
    NormalizedCorrelation::check_simplex(&c_norm.values)?;
    let (h, w) = grid_of(c_norm.values.shape())?;
    let predicted = flow_var(&Var::constant(c_norm.values.clone()))?.value().clone();
    Ok(FlowField {
        source_grid: grid_coordinates(h, w).reshape(&[h, w, 2])?,
        predicted,
    })
}

/// Weights max(0, τ − ‖k − g‖) over grid points g, normalized to sum 1.
/// When no grid point is within τ, the nearest one (lowest index on ties)
/// takes weight 1 and `fallback` is set.
pub fn soft_sampler(
    keypoint: (f64, f64),
    grid: (usize, usize),
    tau_dist: f64,
) -> Result<SoftSamplerWeights> {
    check_positive("tau_dist", tau_dist)?;
    let (h, w) = grid;
    if h == 0 || w == 0 {
        return Err(Error::invalid("soft sampler grid must be non-empty"));
    }
    if !(keypoint.0.is_finite() && keypoint.1.is_finite()) {
        return Err(Error::invalid(format!("keypoint {keypoint:?} is not finite")));
    }
    let (x, y) = keypoint;
    let dist = |p: usize| ((x - (p % w) as f64).powi(2) + (y - (p / w) as f64).powi(2)).sqrt();
    let mut values: Vec<f64> = (0..h * w).map(|p| (tau_dist - dist(p)).max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let fallback = total <= 0.0;
    if fallback {
        let mut nearest = 0;
        for p in 1..h * w {
            if dist(p) < dist(nearest) {
                nearest = p;
            }
        }
        values.iter_mut().for_each(|v| *v = 0.0);
        values[nearest] = 1.0;
    } else {
        values.iter_mut().for_each(|v| *v /= total);
    }
    Ok(SoftSamplerWeights {
        values: Tensor::new(&[h, w], values)?,
        keypoint,
        tau_dist,
        fallback,
    })
}

/// (M, 2) transferred keypoints read off a (H, W, 2) flow, and which of them
/// needed the sampler fallback.
pub fn transfer_keypoints_var(
    flow: &Var,
    keypoints: &[(f64, f64)],
    tau_dist: f64,
) -> Result<(Var, Vec<bool>)> {
    let &[h, w, 2] = flow.shape() else {
        return Err(Error::invalid(format!("flow must be (H, W, 2), got {:?}", flow.shape())));
    };
    if keypoints.is_empty() {
        return Err(Error::Empty("keypoint list"));
    }
    let mut rows = Vec::with_capacity(keypoints.len() * h * w);
    let mut fallbacks = Vec::with_capacity(keypoints.len());
    for &kp in keypoints {
        let s = soft_sampler(kp, (h, w), tau_dist)?;
        rows.extend_from_slice(s.values.data());
        fallbacks.push(s.fallback);
    }
    let sampler = Var::constant(Tensor::new(&[keypoints.len(), h * w], rows)?);
    let out = sampler.matmul(&flow.reshape(&[h * w, 2])?)?;
    Ok((out, fallbacks))
}

pub fn transfer_keypoints(
    flow: &FlowField,
    keypoints: &[(f64, f64)],
    tau_dist: f64,
) -> Result<Vec<(f64, f64)>> {
    let (out, _) = transfer_keypoints_var(&Var::constant(flow.predicted.clone()), keypoints, tau_dist)?;
    Ok(out.value().data().chunks(2).map(|p| (p[0], p[1])).collect())
}

pub fn points_to_tensor(points: &[(f64, f64)]) -> Result<Tensor> {
    if points.is_empty() {
        return Err(Error::Empty("keypoint list"));
    }
    Tensor::new(&[points.len(), 2], points.iter().flat_map(|&(x, y)| [x, y]).collect())
}

/// Mean over keypoints of the squared (or plain) Euclidean distance.
pub fn matching_loss_var(predicted: &Var, ground_truth: &Tensor, norm: LossNorm) -> Result<Var> {
    if predicted.shape() != ground_truth.shape() {
        return Err(Error::shape("matching_loss", predicted.shape(), ground_truth.shape()));
    }
    let &[m, 2] = predicted.shape() else {
        return Err(Error::invalid(format!("keypoints must be (M, 2), got {:?}", predicted.shape())));
    };
    let diff = predicted.sub(&Var::constant(ground_truth.clone()))?;
    let sq = diff.mul(&diff)?.sum_axis(1)?;
    let per = match norm {
        LossNorm::Squared => sq,
        LossNorm::Euclidean => sq.sqrt(),
    };
    Ok(per.sum().scale(1.0 / m as f64))
}

pub fn matching_loss(
    predicted: &[(f64, f64)],
    ground_truth: &[(f64, f64)],
    norm: LossNorm,
) -> Result<f64> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth keypoints",
            predicted.len(),
            ground_truth.len()
        )));
    }
    let p = Var::constant(points_to_tensor(predicted)?);
    let loss = matching_loss_var(&p, &points_to_tensor(ground_truth)?, norm)?;
    loss.value().item()
}

/// Refined (H̄, W̄, H̄, W̄) map → transferred (M, 2) keypoints in grid units.
pub fn predict_keypoints_var(
    refined: &Var,
    keypoints: &[(f64, f64)],
    params: &FlowParams,
) -> Result<(Var, Vec<bool>)> {
    let c_norm = kernel_softargmax_var(refined, params.sigma, params.temperature)?;
    transfer_keypoints_var(&flow_var(&c_norm)?, keypoints, params.tau_dist)
}
