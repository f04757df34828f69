//! Nonlocality: how far, in 4D grid offsets, attention mass travels.
//!
//! Additive attention never forms query-key pairs, so each head is
//! reconstructed as A = softmax_row(Q̂·Kᵀ) with Q̂_i = Q_i·softmax(τ·Q·w_q)_i.
//! For a layer, Φ = (1/(N_h·T))·Σ_h Σ_{q,k} A_{q,k}·‖pos(q) − pos(k)‖².

use serde::{Deserialize, Serialize};

use crate::attention::{flatten_correlation_var, attention_block, Refiner, RopeMode};
use crate::correlation::MultiChannelCorrelation;
use crate::datasets::{DifficultyLabels, DifficultyLevel, DIFFICULTY_TYPES};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_PAIRWISE_CEILING: usize = 4096;
/// Row-sum tolerance of attention matrices fed to [`nonlocality_attention`].
pub const ROW_SIMPLEX_TOL: f64 = 1e-6;

/// Pairwise reconstruction of one additive head as a (T, T) row-stochastic
/// matrix.
pub fn pairwise_attention(
    q_proj: &Tensor,
    k_proj: &Tensor,
    w_q: &Tensor,
    tau: f64,
    ceiling: usize,
) -> Result<Tensor> {
    let &[t, d] = q_proj.shape() else {
        return Err(Error::invalid(format!("queries must be (T, D_h), got {:?}", q_proj.shape())));
    };
    if k_proj.shape() != q_proj.shape() {
        return Err(Error::shape("pairwise_attention", q_proj.shape(), k_proj.shape()));
    }
    if w_q.len() != d {
        return Err(Error::shape("pairwise_attention pool", q_proj.shape(), w_q.shape()));
    }
    if t > ceiling {
        return Err(Error::CeilingExceeded { len: t, ceiling });
    }
    let pooled = q_proj
        .matmul(&w_q.reshape(&[d, 1])?)?
        .scale(tau)
        .softmax(0)?;
    let q_hat = q_proj.mul(&pooled)?;
    q_hat.matmul(&k_proj.transpose()?)?.softmax(1)
}

/// 4D coordinates (i, j, k, l) of flattened match index t.
pub fn decode_position(t: usize, grid: (usize, usize)) -> [i64; 4] {
    let (h, w) = grid;
    let l = t % w;
    let k = (t / w) % h;
    let j = (t / (w * h)) % w;
    let i = t / (w * h * w);
    [i as i64, j as i64, k as i64, l as i64]
}

fn offset_sq(a: [i64; 4], b: [i64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| ((x - y) * (x - y)) as f64).sum()
}

/// Φ of one layer given each head's (T, T) attention matrix.
pub fn nonlocality_attention(heads: &[Tensor], grid: (usize, usize)) -> Result<f64> {
    let positions: Vec<[i64; 4]> = {
        let (h, w) = grid;
        (0..h * w * h * w).map(|t| decode_position(t, grid)).collect()
    };
    nonlocality_with_positions(heads, &positions)
}

/// Φ with an explicit position for every row/column index.
pub fn nonlocality_with_positions(heads: &[Tensor], positions: &[[i64; 4]]) -> Result<f64> {
    if heads.is_empty() {
        return Err(Error::Empty("attention heads"));
    }
    let t = positions.len();
    let mut total = 0.0;
    for a in heads {
        if a.shape() != [t, t] {
            return Err(Error::shape("nonlocality", a.shape(), &[t, t]));
        }
        for (q, row) in a.data().chunks(t).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SIMPLEX_TOL || row.iter().any(|&v| v < -ROW_SIMPLEX_TOL) {
                return Err(Error::SimplexViolation { index: q, sum });
            }
            for (k, &v) in row.iter().enumerate() {
                total += v * offset_sq(positions[q], positions[k]);
            }
        }
    }
    Ok(total / (heads.len() * t) as f64)
}

/// A d-dimensional convolution with odd kernel size K.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub dim: usize,
}

impl ConvSpec {
    pub fn new(kernel_size: usize, dim: usize) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {kernel_size}")));
        }
        if dim == 0 {
            return Err(Error::invalid("convolution dimensionality must be positive"));
        }
        Ok(ConvSpec { kernel_size, dim })
    }

    fn radius(&self) -> i64 {
        (self.kernel_size as i64 - 1) / 2
    }
}

/// Φ of a convolution seen as one head per kernel offset, each attending
/// with weight 1 to its offset: the mean of ‖Δ‖² over every Δ in [−m, m]^d,
/// enumerated.
pub fn nonlocality_conv(spec: ConvSpec) -> Result<f64> {
    let spec = ConvSpec::new(spec.kernel_size, spec.dim)?;
    let m = spec.radius();
    let mut offset = vec![-m; spec.dim];
    let (mut sum, mut count) = (0i64, 0i64);
    loop {
        sum += offset.iter().map(|o| o * o).sum::<i64>();
        count += 1;
        let mut axis = 0;
        loop {
            if axis == spec.dim {
                return Ok(sum as f64 / count as f64);
            }
            if offset[axis] < m {
                offset[axis] += 1;
                break;
            }
            offset[axis] = -m;
            axis += 1;
        }
    }
}

/// d·m(m+1)/3 with m = (K − 1)/2.
pub fn nonlocality_conv_closed_form(spec: ConvSpec) -> Result<f64> {
    let spec = ConvSpec::new(spec.kernel_size, spec.dim)?;
    let m = spec.radius();
    Ok((spec.dim as i64 * m * (m + 1)) as f64 / 3.0)
}

/// Query and key projections of every head of every block, on one input.
pub fn head_projections(
    refiner: &Refiner,
    c: &MultiChannelCorrelation,
) -> Result<Vec<Vec<(Tensor, Tensor, Tensor)>>> {
    let cfg = refiner.config();
    let (h, w) = c.grid_size();
    if (h, w) != cfg.grid {
        return Err(Error::invalid(format!(
            "correlation grid {:?} differs from the refiner grid {:?}",
            (h, w),
            cfg.grid
        )));
    }
    let params = refiner.params().to_constants();
    let rope = match cfg.rope.mode {
        RopeMode::Rotary => refiner.rope_table(),
        _ => None,
    };
    let mut x = flatten_correlation_var(&Var::constant(c.values.clone()))?.matmul(&params.w_in)?;
    if let Some(table) = &params.pos_table {
        x = x.add(table)?;
    }
    let mut layers = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let a = x.layer_norm(&block.ln1.gamma, &block.ln1.beta, cfg.stack.ln_eps)?;
        let mut heads = Vec::with_capacity(block.attn.heads.len());
        for head in &block.attn.heads {
            let mut q = a.matmul(&head.w_q)?;
            let mut k = a.matmul(&head.w_k)?;
            if let Some(table) = rope {
                q = table.apply(&q)?;
                k = table.apply(&k)?;
            }
            heads.push((q.value().clone(), k.value().clone(), head.q_pool.value().clone()));
        }
        layers.push(heads);
        x = attention_block(&x, block, rope, &cfg.stack)?;
    }
    Ok(layers)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlocalityReport {
    pub per_layer: Vec<f64>,
    /// Σ over layers.
    pub total: f64,
    pub n_heads: usize,
    pub grid: (usize, usize),
}

/// Per-layer Φ of a refiner on one correlation.
pub fn refiner_nonlocality(
    refiner: &Refiner,
    c: &MultiChannelCorrelation,
    ceiling: usize,
) -> Result<NonlocalityReport> {
    let cfg = refiner.config();
    let tau = cfg.stack.tau_attn;
    let mut per_layer = Vec::new();
    for heads in head_projections(refiner, c)? {
        let mats = heads
            .iter()
            .map(|(q, k, wq)| pairwise_attention(q, k, wq, tau, ceiling))
            .collect::<Result<Vec<_>>>()?;
        per_layer.push(nonlocality_attention(&mats, cfg.grid)?);
    }
    Ok(NonlocalityReport {
        total: per_layer.iter().sum(),
        per_layer,
        n_heads: cfg.stack.n_heads,
        grid: cfg.grid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBin {
    pub n_samples: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    /// Per difficulty type (in [`DIFFICULTY_TYPES`] order), the share of
    /// easy, medium and hard samples.
    pub proportions: Vec<[f64; 3]>,
}

/// Sorts samples by Φ (stable) into `n_bins` equal-count groups, giving the
/// remainder to the earliest bins, and tabulates difficulty shares per bin.
pub fn difficulty_binning(
    samples: &[(f64, DifficultyLabels)],
    n_bins: usize,
) -> Result<Vec<DifficultyBin>> {
    if samples.is_empty() {
        return Err(Error::Empty("nonlocality samples"));
    }
    if n_bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].0.total_cmp(&samples[b].0));
    let (base, extra) = (samples.len() / n_bins, samples.len() % n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let size = base + usize::from(b < extra);
        let members = &order[start..start + size];
        start += size;
        let mut proportions = vec![[0.0; 3]; DIFFICULTY_TYPES.len()];
        for &s in members {
            let labels = &samples[s].1;
            for (ty, slot) in proportions.iter_mut().enumerate() {
                let level = labels.get(ty);
                slot[level as usize] += 1.0 / size as f64;
            }
        }
        let phis = members.iter().map(|&s| samples[s].0);
        bins.push(DifficultyBin {
            n_samples: size,
            phi_min: phis.clone().fold(f64::INFINITY, f64::min),
            phi_max: phis.fold(f64::NEG_INFINITY, f64::max),
            proportions,
        });
    }
    Ok(bins)
}

/// Number of samples in each of `n_bins` bins.
pub fn bin_sizes(n: usize, n_bins: usize) -> Vec<usize> {
    (0..n_bins).map(|b| n / n_bins + usize::from(b < n % n_bins)).collect()
}

pub const LAYER_CSV_HEADER: &str = "pair_id,layer,phi";
pub const BIN_CSV_HEADER: &str = "bin,n_samples,phi_min,phi_max,difficulty_type,easy,medium,hard";
pub const CONV_CSV_HEADER: &str = "kernel_size,dim,phi_enumerated,phi_closed_form";

pub fn bins_to_csv(bins: &[DifficultyBin]) -> String {
    let mut out = format!("{BIN_CSV_HEADER}\n");
    for (b, bin) in bins.iter().enumerate() {
        for (ty, p) in DIFFICULTY_TYPES.iter().zip(&bin.proportions) {
            out.push_str(&format!(
                "{b},{},{},{},{ty},{},{},{}\n",
                bin.n_samples, bin.phi_min, bin.phi_max, p[0], p[1], p[2]
            ));
        }
    }
    out
}

impl DifficultyLabels {
    fn get(&self, ty: usize) -> DifficultyLevel {
        match ty {
            0 => self.viewpoint,
            1 => self.scale,
            2 => self.truncation,
            _ => self.occlusion,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pairwise_trivial_cases() {
        let one = Tensor::new(&[1, 2], vec![0.3, -1.0]).unwrap();
        let a = pairwise_attention(&one, &one, &Tensor::vector(&[1.0, 2.0]), 0.5, 16).unwrap();
        assert_eq!(a.data(), &[1.0]);
        let q = Tensor::full(&[5, 3], 0.7);
        let a = pairwise_attention(&q, &q, &Tensor::vector(&[1.0, 0.0, 2.0]), 1.0, 16).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(matches!(
            pairwise_attention(&q, &q, &Tensor::vector(&[1.0, 0.0, 2.0]), 1.0, 4),
            Err(Error::CeilingExceeded { .. })
        ));
    }

    #[test]
    fn pairwise_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, d, tau) = (8, 4, 0.5);
        let q = Tensor::randn(&[t, d], 1.0, &mut rng);
        let k = Tensor::randn(&[t, d], 1.0, &mut rng);
        let wq = Tensor::randn(&[d], 1.0, &mut rng);
        let a = pairwise_attention(&q, &k, &wq, tau, 64).unwrap();
        let logits: Vec<f64> = (0..t)
            .map(|i| tau * (0..d).map(|c| q.at(&[i, c]) * wq.at(&[c])).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        for i in 0..t {
            let s = logits[i].exp() / z;
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|c| q.at(&[i, c]) * s * k.at(&[j, c])).sum::<f64>().exp())
                .collect();
            let zs: f64 = scores.iter().sum();
            let row: f64 = (0..t).map(|j| a.at(&[i, j])).sum();
            assert!((row - 1.0).abs() < 1e-9);
            for j in 0..t {
                assert!((a.at(&[i, j]) - scores[j] / zs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_and_two_point_nonlocality() {
        let grid = (2, 2);
        assert_eq!(nonlocality_attention(&[Tensor::eye(16)], grid).unwrap(), 0.0);
        let p = [[0, 0, 0, 0], [1, 2, 0, 1]];
        let uniform = Tensor::full(&[2, 2], 0.5);
        let phi = nonlocality_with_positions(&[uniform], &p).unwrap();
        assert_eq!(phi, 6.0 / 2.0);
    }

    #[test]
    fn uniform_matches_exhaustive_sum() {
        let grid = (2, 2);
        let a = Tensor::full(&[16, 16], 1.0 / 16.0);
        let mut want = 0.0;
        for q in 0..16 {
            for k in 0..16 {
                let (pq, pk) = (decode_position(q, grid), decode_position(k, grid));
                let d2: i64 = (0..4).map(|x| (pq[x] - pk[x]).pow(2)).sum();
                want += d2 as f64 / 16.0;
            }
        }
        let got = nonlocality_attention(&[a.clone(), a], grid).unwrap();
        assert!((got - want / 16.0).abs() < 1e-12);
        assert!(nonlocality_attention(&[Tensor::full(&[16, 16], 0.1)], grid).is_err());
    }

    #[test]
    fn decode_inverts_flattening() {
        let (h, w) = (2, 3);
        for t in 0..h * w * h * w {
            let [i, j, k, l] = decode_position(t, (h, w)).map(|v| v as usize);
            assert_eq!(((i * w + j) * h + k) * w + l, t);
        }
    }

    #[test]
    fn conv_baselines() {
        assert_eq!(nonlocality_conv(ConvSpec::new(1, 3).unwrap()).unwrap(), 0.0);
        assert_eq!(nonlocality_conv(ConvSpec::new(3, 2).unwrap()).unwrap(), 4.0 / 3.0);
        assert_eq!(nonlocality_conv(ConvSpec::new(5, 4).unwrap()).unwrap(), 8.0);
        assert!(ConvSpec::new(4, 2).is_err());
        assert!(nonlocality_conv(ConvSpec { kernel_size: 2, dim: 2 }).is_err());
    }

    fn labels(level: DifficultyLevel) -> DifficultyLabels {
        DifficultyLabels { viewpoint: level, scale: level, truncation: level, occlusion: level }
    }

    #[test]
    fn binning_sizes_and_order() {
        let samples: Vec<_> = (0..7).map(|i| (7.0 - i as f64, labels(DifficultyLevel::Hard))).collect();
        let bins = difficulty_binning(&samples, 3).unwrap();
        assert_eq!(bins.iter().map(|b| b.n_samples).collect::<Vec<_>>(), [3, 2, 2]);
        assert_eq!(bin_sizes(7, 3), [3, 2, 2]);
        assert_eq!((bins[0].phi_min, bins[0].phi_max), (1.0, 3.0));
        assert!(bins.iter().all(|b| b.proportions.iter().all(|p| *p == [0.0, 0.0, 1.0])));
        let one_each = difficulty_binning(&samples[..], 7).unwrap();
        assert!(one_each.windows(2).all(|w| w[0].phi_max <= w[1].phi_min));
        assert!(difficulty_binning(&[], 2).is_err());
        assert!(bins_to_csv(&bins).starts_with(BIN_CSV_HEADER));
    }
}
