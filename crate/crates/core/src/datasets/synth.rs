//! Seeded synthetic correspondence pairs with exact ground truth.
//!
//! Source features are box-blurred white noise on a padded canvas; the
//! target samples that canvas through the inverse warp, so a target grid
//! point q shows what the source had at warp⁻¹(q). Keypoints are source
//! grid points and their exact forward images.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::{DifficultyLabels, DifficultyLevel, KeypointPairSet};
use crate::correlation::{FeatureMap, FeatureStack};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest |det| accepted for a warp.
pub const MIN_WARP_DET: f64 = 1e-6;

/// Geometric part of a warp, in grid units (x = column, y = row). Rotation
/// (radians) and scale act about the grid centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarpKind {
    Translation { dx: f64, dy: f64 },
    Rotation { angle: f64 },
    Scale { factor: f64 },
    Affine { matrix: [[f64; 2]; 2], offset: [f64; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    #[serde(flatten)]
    pub kind: WarpKind,
    /// Std of the Gaussian noise added to target features.
    #[serde(default)]
    pub sigma_feat: f64,
}

/// p ↦ A·p + b.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine2 {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl Affine2 {
    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let a = &self.a;
        (a[0][0] * x + a[0][1] * y + self.b[0], a[1][0] * x + a[1][1] * y + self.b[1])
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let det = self.det();
        if det.abs() <= MIN_WARP_DET || !det.is_finite() {
            return Err(Error::invalid(format!("warp is not invertible (det {det})")));
        }
        let a = &self.a;
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        let b = [
            -(inv[0][0] * self.b[0] + inv[0][1] * self.b[1]),
            -(inv[1][0] * self.b[0] + inv[1][1] * self.b[1]),
        ];
        Ok(Affine2 { a: inv, b })
    }
}

impl WarpSpec {
    pub fn identity() -> Self {
        WarpSpec { kind: WarpKind::Translation { dx: 0.0, dy: 0.0 }, sigma_feat: 0.0 }
    }

    pub fn translation(dx: f64, dy: f64, sigma_feat: f64) -> Self {
        WarpSpec { kind: WarpKind::Translation { dx, dy }, sigma_feat }
    }

    /// The warp as an affine map on a (H, W) grid.
    pub fn affine(&self, grid: (usize, usize)) -> Affine2 {
        let cx = (grid.1 as f64 - 1.0) / 2.0;
        let cy = (grid.0 as f64 - 1.0) / 2.0;
        let about_centre = |a: [[f64; 2]; 2]| Affine2 {
            a,
            b: [cx - a[0][0] * cx - a[0][1] * cy, cy - a[1][0] * cx - a[1][1] * cy],
        };
        match self.kind {
            WarpKind::Translation { dx, dy } => Affine2 { a: [[1.0, 0.0], [0.0, 1.0]], b: [dx, dy] },
            WarpKind::Rotation { angle } => {
                let (s, c) = angle.sin_cos();
                about_centre([[c, -s], [s, c]])
            }
            WarpKind::Scale { factor } => about_centre([[factor, 0.0], [0.0, factor]]),
            WarpKind::Affine { matrix, offset } => Affine2 { a: matrix, b: offset },
        }
    }

    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        if !(self.sigma_feat >= 0.0 && self.sigma_feat.is_finite()) {
            return Err(Error::invalid("sigma_feat must be non-negative"));
        }
        let m = self.affine(grid);
        if !m.a.iter().flatten().chain(&m.b).all(|v| v.is_finite()) {
            return Err(Error::invalid("warp parameters must be finite"));
        }
        m.inverse().map(|_| ())
    }

    /// Mean displacement ‖warp(p) − p‖ over the grid, in grid cells.
    pub fn magnitude(&self, grid: (usize, usize)) -> f64 {
        let m = self.affine(grid);
        let (h, w) = grid;
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let p = (x as f64, y as f64);
                let q = m.apply(p);
                total += (q.0 - p.0).hypot(q.1 - p.1);
            }
        }
        total / (h * w) as f64
    }
}

/// Shape of a generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Feature grid (H, W).
    pub grid: (usize, usize),
    pub depth: usize,
    pub layers: usize,
    pub n_keypoints: usize,
    /// (width, height) in pixels; keypoints are reported in pixels.
    pub image_size: (usize, usize),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grid.0 > 0
            && self.grid.1 > 0
            && self.depth > 0
            && self.layers > 0
            && self.n_keypoints > 0
            && self.image_size.0 > 0
            && self.image_size.1 > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("synthetic spec has a zero dimension: {self:?}")))
        }
    }

    /// Pixels per grid cell along (x, y).
    pub fn pixel_scale(&self) -> (f64, f64) {
        (
            self.image_size.0 as f64 / self.grid.1 as f64,
            self.image_size.1 as f64 / self.grid.0 as f64,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub source: FeatureStack,
    pub target: FeatureStack,
    pub pair: KeypointPairSet,
    pub warp: WarpSpec,
}

struct Canvas {
    h: usize,
    w: usize,
    d: usize,
    pad: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn smoothed_noise(h: usize, w: usize, d: usize, pad: usize, rng: &mut ChaCha8Rng) -> Canvas {
        let (hc, wc) = (h + 2 * pad, w + 2 * pad);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let raw: Vec<f64> = (0..hc * wc * d).map(|_| normal.sample(rng)).collect();
        let mut data = vec![0.0; raw.len()];
        for y in 0..hc {
            for x in 0..wc {
                let mut count = 0.0;
                let base = (y * wc + x) * d;
                for yy in y.saturating_sub(1)..(y + 2).min(hc) {
                    for xx in x.saturating_sub(1)..(x + 2).min(wc) {
                        let src = (yy * wc + xx) * d;
                        for c in 0..d {
                            data[base + c] += raw[src + c];
                        }
                        count += 1.0;
                    }
                }
                for v in &mut data[base..base + d] {
                    *v /= count;
                }
            }
        }
        Canvas { h: hc, w: wc, d, pad, data }
    }

    fn at(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.w + x) * self.d;
        &self.data[o..o + self.d]
    }

    /// Bilinear sample at grid coordinates (x, y) of the unpadded map;
    /// positions beyond the canvas clamp to its border.
    fn sample(&self, x: f64, y: f64, out: &mut [f64]) {
        let cx = (x + self.pad as f64).clamp(0.0, (self.w - 1) as f64);
        let cy = (y + self.pad as f64).clamp(0.0, (self.h - 1) as f64);
        let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
        let taps = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x1, (1.0 - fy) * fx),
            (y1, x0, fy * (1.0 - fx)),
            (y1, x1, fy * fx),
        ];
        out.iter_mut().for_each(|v| *v = 0.0);
        for (yy, xx, wgt) in taps {
            if wgt == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.at(yy, xx)) {
                *o += wgt * v;
            }
        }
    }
}

/// Padding so every inverse-warped target grid point lands on the canvas.
fn padding_for(inv: &Affine2, grid: (usize, usize)) -> usize {
    let (h, w) = grid;
    let (xm, ym) = ((w - 1) as f64, (h - 1) as f64);
    let mut over: f64 = 0.0;
    for corner in [(0.0, 0.0), (xm, 0.0), (0.0, ym), (xm, ym)] {
        let (x, y) = inv.apply(corner);
        over = over.max(-x).max(-y).max(x - xm).max(y - ym);
    }
    let cap = 4 * h.max(w);
    (over.ceil().max(0.0) as usize + 2).min(cap)
}

/// Generates one pair. Deterministic in (seed, spec, warp).
pub fn synth_pair(seed: u64, spec: &SynthSpec, warp: &WarpSpec) -> Result<SynthPair> {
    spec.validate()?;
    warp.validate(spec.grid)?;
    let (h, w) = spec.grid;
    let d = spec.depth;
    let fwd = warp.affine(spec.grid);
    let inv = fwd.inverse()?;
    let pad = padding_for(&inv, spec.grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, warp.sigma_feat.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut src_maps = Vec::with_capacity(spec.layers);
    let mut tgt_maps = Vec::with_capacity(spec.layers);
    for layer in 0..spec.layers {
        let canvas = Canvas::smoothed_noise(h, w, d, pad, &mut rng);
        let mut src = Vec::with_capacity(h * w * d);
        for y in 0..h {
            for x in 0..w {
                src.extend_from_slice(canvas.at(y + pad, x + pad));
            }
        }
        let mut tgt = vec![0.0; h * w * d];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv.apply((x as f64, y as f64));
                let o = (y * w + x) * d;
                canvas.sample(sx, sy, &mut tgt[o..o + d]);
            }
        }
        if warp.sigma_feat > 0.0 {
            for v in &mut tgt {
                *v += noise.sample(&mut rng);
            }
        }
        src_maps.push(FeatureMap::new(Tensor::new(&[h, w, d], src)?, layer, spec.image_size)?);
        tgt_maps.push(FeatureMap::new(Tensor::new(&[h, w, d], tgt)?, layer, spec.image_size)?);
    }

    let mut candidates: Vec<(usize, usize)> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect();
    candidates.shuffle(&mut rng);
    let eps = 1e-9;
    let inside = |(x, y): (f64, f64)| {
        (-eps..=(w - 1) as f64 + eps).contains(&x) && (-eps..=(h - 1) as f64 + eps).contains(&y)
    };
    let (sx, sy) = spec.pixel_scale();
    let (mut src_kps, mut tgt_kps) = (Vec::new(), Vec::new());
    for (x, y) in candidates {
        if src_kps.len() == spec.n_keypoints {
            break;
        }
        let p = (x as f64, y as f64);
        let q = fwd.apply(p);
        if inside(q) {
            let q = (q.0.clamp(0.0, (w - 1) as f64), q.1.clamp(0.0, (h - 1) as f64));
            src_kps.push([p.0 * sx, p.1 * sy]);
            tgt_kps.push([q.0 * sx, q.1 * sy]);
        }
    }
    if src_kps.is_empty() {
        return Err(Error::invalid("warp maps every keypoint outside the target grid"));
    }
    let (iw, ih) = (spec.image_size.0 as f64, spec.image_size.1 as f64);
    let pair = KeypointPairSet {
        pair_id: format!("synth-{seed:016x}"),
        category: warp_category(&warp.kind).to_string(),
        src_img_size: [iw, ih],
        tgt_img_size: [iw, ih],
        src_bbox: [0.0, 0.0, iw, ih],
        tgt_bbox: [0.0, 0.0, iw, ih],
        src_kps,
        tgt_kps,
        difficulty: None,
    };
    pair.validate()?;
    Ok(SynthPair {
        source: FeatureStack::new(src_maps)?,
        target: FeatureStack::new(tgt_maps)?,
        pair,
        warp: warp.clone(),
    })
}

fn warp_category(kind: &WarpKind) -> &'static str {
    match kind {
        WarpKind::Translation { .. } => "translation",
        WarpKind::Rotation { .. } => "rotation",
        WarpKind::Scale { .. } => "scale",
        WarpKind::Affine { .. } => "affine",
    }
}

/// Random warp family for dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarpSampler {
    /// dx, dy ~ U(−max_shift, max_shift).
    Translation { max_shift: f64 },
    /// angle ~ U(−max_angle, max_angle).
    Rotation { max_angle: f64 },
    /// factor ~ U(min, max).
    Scale { min: f64, max: f64 },
    /// A = I + U(−max_distortion, ·) per entry, offset ~ U(−max_shift, ·).
    Affine { max_distortion: f64, max_shift: f64 },
}

impl WarpSampler {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            WarpSampler::Translation { max_shift } => max_shift >= 0.0 && max_shift.is_finite(),
            WarpSampler::Rotation { max_angle } => max_angle >= 0.0 && max_angle.is_finite(),
            WarpSampler::Scale { min, max } => min > 0.0 && min <= max && max.is_finite(),
            WarpSampler::Affine { max_distortion, max_shift } => {
                (0.0..0.5).contains(&max_distortion) && max_shift >= 0.0 && max_shift.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid warp sampler {self:?}")))
        }
    }

    pub fn sample(&self, sigma_feat: f64, rng: &mut impl Rng) -> WarpSpec {
        let mut sym = |r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let kind = match *self {
            WarpSampler::Translation { max_shift } => WarpKind::Translation { dx: sym(max_shift), dy: sym(max_shift) },
            WarpSampler::Rotation { max_angle } => WarpKind::Rotation { angle: sym(max_angle) },
            WarpSampler::Scale { min, max } => {
                let half = (max - min) / 2.0;
                WarpKind::Scale { factor: min + half + sym(half) }
            }
            WarpSampler::Affine { max_distortion: e, max_shift: s } => WarpKind::Affine {
                matrix: [[1.0 + sym(e), sym(e)], [sym(e), 1.0 + sym(e)]],
                offset: [sym(s), sym(s)],
            },
        };
        WarpSpec { kind, sigma_feat }
    }
}

/// A reproducible collection of synthetic pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetConfig {
    pub seed: u64,
    pub n_pairs: usize,
    #[serde(flatten)]
    pub spec: SynthSpec,
    pub warp: WarpSampler,
    pub sigma_feat: f64,
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::invalid("synthetic dataset needs at least one pair"));
        }
        if !(self.sigma_feat >= 0.0 && self.sigma_feat.is_finite()) {
            return Err(Error::invalid("sigma_feat must be non-negative"));
        }
        self.spec.validate()?;
        self.warp.validate()
    }

    /// Seed of pair `index`; distinct indices give unrelated streams.
    pub fn pair_seed(&self, index: usize) -> u64 {
        let mut z = self.seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Pair `index` of the dataset, without difficulty labels.
    pub fn pair(&self, index: usize) -> Result<SynthPair> {
        let seed = self.pair_seed(index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5741_5250);
        let warp = self.warp.sample(self.sigma_feat, &mut rng);
        synth_pair(seed, &self.spec, &warp)
    }

    /// All pairs, labelled by warp-magnitude tercile.
    pub fn generate(&self) -> Result<Vec<SynthPair>> {
        self.validate()?;
        let mut pairs = (0..self.n_pairs).map(|i| self.pair(i)).collect::<Result<Vec<_>>>()?;
        let mags: Vec<f64> = pairs.iter().map(|p| p.warp.magnitude(self.spec.grid)).collect();
        for (p, level) in pairs.iter_mut().zip(magnitude_labels(&mags)) {
            p.pair.difficulty = Some(DifficultyLabels::uniform(level));
        }
        Ok(pairs)
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Easy up to the 33rd percentile, medium up to the 66th, hard above.
pub fn magnitude_labels(magnitudes: &[f64]) -> Vec<DifficultyLevel> {
    if magnitudes.is_empty() {
        return Vec::new();
    }
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, q2) = (quantile(&sorted, 0.33), quantile(&sorted, 0.66));
    magnitudes
        .iter()
        .map(|&m| {
            if m <= q1 {
                DifficultyLevel::Easy
            } else if m <= q2 {
                DifficultyLevel::Medium
            } else {
                DifficultyLevel::Hard
            }
        })
        .collect()
}
