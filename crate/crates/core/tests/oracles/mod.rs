//! Literal loop implementations used as independent references. They share
//! no code with the library beyond reading tensor entries.
#![allow(dead_code)]

use m2m_core::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.at(&[i, j])).collect()).collect()
}

pub fn project(x: &Rows, w: &Tensor) -> Rows {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| (0..n).map(|j| (0..k).map(|p| row[p] * w.at(&[p, j])).sum()).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Rotates interleaved pairs (2p, 2p+1) of a row by `angles[p]`.
pub fn rotate(row: &[f64], angles: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    for (p, &a) in angles.iter().enumerate() {
        let (x, y) = (row[2 * p], row[2 * p + 1]);
        out[2 * p] = a.cos() * x - a.sin() * y;
        out[2 * p + 1] = a.sin() * x + a.cos() * y;
    }
    out
}

/// Per-plane angles of the flattened partition: the first D_h/4 planes
/// follow i·W + j, the rest k·W + l, each group with frequencies
/// base^(−2p/(D_h/2)).
pub fn flattened_angles(coord: [i64; 4], w: usize, d_head: usize, base: f64) -> Vec<f64> {
    let group = d_head / 2;
    let src = (coord[0] * w as i64 + coord[1]) as f64;
    let tgt = (coord[2] * w as i64 + coord[3]) as f64;
    let mut out = Vec::new();
    for pos in [src, tgt] {
        for p in 0..group / 2 {
            out.push(base.powf(-2.0 * p as f64 / group as f64) * pos);
        }
    }
    out
}

/// Per-axis partition: D_h/4 dimensions per coordinate i, j, k, l.
pub fn per_axis_angles(coord: [i64; 4], d_head: usize, base: f64) -> Vec<f64> {
    let group = d_head / 4;
    let mut out = Vec::new();
    for &c in &coord {
        for p in 0..group / 2 {
            out.push(base.powf(-2.0 * p as f64 / group as f64) * c as f64);
        }
    }
    out
}

pub struct HeadWeights<'a> {
    pub w_q: &'a Tensor,
    pub w_k: &'a Tensor,
    pub w_v: &'a Tensor,
    pub q_pool: &'a Tensor,
    pub k_pool: &'a Tensor,
}

/// Global query g = Σ_j α_j Q_j with α = softmax_j(τ·w_q·Q_j); H_i = K_i ⊙ g;
/// global key h = Σ_j β_j H_j with β = softmax_j(τ·w_k·H_j); out_i = V_i ⊙ h.
pub fn additive_head(x: &Rows, p: &HeadWeights, tau: f64, angles: Option<&[Vec<f64>]>) -> Rows {
    let mut q = project(x, p.w_q);
    let mut k = project(x, p.w_k);
    let v = project(x, p.w_v);
    if let Some(a) = angles {
        for t in 0..q.len() {
            q[t] = rotate(&q[t], &a[t]);
            k[t] = rotate(&k[t], &a[t]);
        }
    }
    let d = q[0].len();
    let wq = p.q_pool.data();
    let wk = p.k_pool.data();
    let alpha = softmax(&q.iter().map(|r| tau * dot(r, wq)).collect::<Vec<_>>());
    let mut g = vec![0.0; d];
    for (t, row) in q.iter().enumerate() {
        for c in 0..d {
            g[c] += alpha[t] * row[c];
        }
    }
    let hk: Rows = k.iter().map(|row| (0..d).map(|c| row[c] * g[c]).collect()).collect();
    let beta = softmax(&hk.iter().map(|r| tau * dot(r, wk)).collect::<Vec<_>>());
    let mut h = vec![0.0; d];
    for (t, row) in hk.iter().enumerate() {
        for c in 0..d {
            h[c] += beta[t] * row[c];
        }
    }
    v.iter().map(|row| (0..d).map(|c| row[c] * h[c]).collect()).collect()
}

/// softmax_row(τ·Q·Kᵀ)·V.
pub fn vanilla_head(x: &Rows, p: &HeadWeights, tau: f64) -> Rows {
    let q = project(x, p.w_q);
    let k = project(x, p.w_k);
    let v = project(x, p.w_v);
    q.iter()
        .map(|qi| {
            let a = softmax(&k.iter().map(|kj| tau * dot(qi, kj)).collect::<Vec<_>>());
            (0..v[0].len()).map(|c| (0..v.len()).map(|j| a[j] * v[j][c]).sum()).collect()
        })
        .collect()
}

pub fn layer_norm(x: &Rows, gamma: &Tensor, beta: &Tensor, eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(d, v)| (v - mean) / (var + eps).sqrt() * gamma.data()[d] + beta.data()[d])
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add_bias(x: &Rows, b: &Tensor) -> Rows {
    x.iter().map(|r| r.iter().zip(b.data()).map(|(v, b)| v + b).collect()).collect()
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// Kernel soft-argmax of a (H, W, H, W) map: per source slice, a Gaussian
/// around the first maximum modulates the scores before a softmax.
pub fn kernel_softargmax(c: &Tensor, sigma: f64, temperature: f64) -> Tensor {
    let (h, w) = (c.shape()[0], c.shape()[1]);
    let mut out = Tensor::zeros(c.shape());
    for i in 0..h {
        for j in 0..w {
            let (mut pk, mut pl, mut best) = (0, 0, f64::NEG_INFINITY);
            for k in 0..h {
                for l in 0..w {
                    if c.at(&[i, j, k, l]) > best {
                        best = c.at(&[i, j, k, l]);
                        (pk, pl) = (k, l);
                    }
                }
            }
            let mut logits = vec![];
            for k in 0..h {
                for l in 0..w {
                    let d2 = (k as f64 - pk as f64).powi(2) + (l as f64 - pl as f64).powi(2);
                    let g = (-d2 / (2.0 * sigma * sigma)).exp();
                    logits.push(g * c.at(&[i, j, k, l]) / temperature);
                }
            }
            let p = softmax(&logits);
            for k in 0..h {
                for l in 0..w {
                    out.set(&[i, j, k, l], p[k * w + l]);
                }
            }
        }
    }
    out
}

/// Expected (x = column, y = row) target coordinate of every source slice.
pub fn flow(p: &Tensor) -> Tensor {
    let (h, w) = (p.shape()[0], p.shape()[1]);
    let mut out = Tensor::zeros(&[h, w, 2]);
    for i in 0..h {
        for j in 0..w {
            let (mut x, mut y) = (0.0, 0.0);
            for k in 0..h {
                for l in 0..w {
                    x += p.at(&[i, j, k, l]) * l as f64;
                    y += p.at(&[i, j, k, l]) * k as f64;
                }
            }
            out.set(&[i, j, 0], x);
            out.set(&[i, j, 1], y);
        }
    }
    out
}

/// Σ_m 1[‖p_m − g_m‖ ≤ α·max(w, h)] / M.
pub fn pck(pred: &[(f64, f64)], gt: &[(f64, f64)], size: (f64, f64), alpha: f64) -> f64 {
    let thr = alpha * size.0.max(size.1);
    let mut hits = 0usize;
    for m in 0..pred.len() {
        let dx = pred[m].0 - gt[m].0;
        let dy = pred[m].1 - gt[m].1;
        if (dx * dx + dy * dy).sqrt() <= thr {
            hits += 1;
        }
    }
    hits as f64 / pred.len() as f64
}

pub fn max_abs_diff(a: &Rows, b: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b.at(&[i, j])).abs());
        }
    }
    worst
}

/// Reference size by mode name: "img" passes the image through, "bbox"
/// subtracts corners, "bbox_kp" takes the min/max extent of `kps`.
pub fn reference_size(mode: &str, image: (f64, f64), bbox: (f64, f64, f64, f64), kps: &[(f64, f64)]) -> (f64, f64) {
    match mode {
        "img" => image,
        "bbox" => (bbox.2 - bbox.0, bbox.3 - bbox.1),
        _ => {
            let xs: Vec<f64> = kps.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = kps.iter().map(|p| p.1).collect();
            let span = |v: &[f64]| {
                v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            (span(&xs), span(&ys))
        }
    }
}

pub struct PckCase {
    pub image: (f64, f64),
    pub bbox: (f64, f64, f64, f64),
    pub gt: Vec<(f64, f64)>,
    pub pred: Vec<(f64, f64)>,
    pub alpha: f64,
}

/// A random scoring problem where roughly a third of the predictions sit
/// exactly on the threshold circle of `mode` along an axis.
pub fn pck_case(rng: &mut impl rand::Rng, mode: &str) -> PckCase {
    let image = (rng.gen_range(32..512) as f64, rng.gen_range(32..512) as f64);
    let (x0, y0) = (rng.gen_range(0.0..image.0 / 2.0), rng.gen_range(0.0..image.1 / 2.0));
    let bbox = (x0, y0, rng.gen_range(x0 + 1.0..image.0), rng.gen_range(y0 + 1.0..image.1));
    let m = rng.gen_range(2..12);
    let gt: Vec<(f64, f64)> = (0..m).map(|_| (rng.gen_range(0.0..image.0), rng.gen_range(0.0..image.1))).collect();
    let alpha = [0.05, 0.1, 0.15][rng.gen_range(0..3)];
    let size = reference_size(mode, image, bbox, &gt);
    let thr = alpha * size.0.max(size.1);
    let pred = gt
        .iter()
        .map(|&(x, y)| match rng.gen_range(0..3) {
            0 => (x + thr, y),
            1 => (x, y - thr),
            _ => (x + rng.gen_range(-2.0..2.0) * thr, y + rng.gen_range(-2.0..2.0) * thr),
        })
        .collect();
    PckCase { image, bbox, gt, pred, alpha }
}
