//! Forward kernels and the raw gradient helpers the autodiff graph uses.

use std::fmt;
use std::str::FromStr;

use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Gelu,
    Sqrt,
    Scale(f64),
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul | ElementwiseOp::Div
        )
    }

    pub(crate) fn unary(self, x: f64) -> f64 {
        match self {
            ElementwiseOp::Relu => x.max(0.0),
            ElementwiseOp::Exp => x.exp(),
            ElementwiseOp::Gelu => gelu(x),
            ElementwiseOp::Sqrt => x.sqrt(),
            ElementwiseOp::Scale(c) => c * x,
            _ => unreachable!("binary op applied as unary"),
        }
    }

    pub(crate) fn binary(self, a: f64, b: f64) -> f64 {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
            ElementwiseOp::Div => a / b,
            _ => unreachable!("unary op applied as binary"),
        }
    }
}

impl FromStr for ElementwiseOp {
    type Err = Error;

    /// Parses `add`, `sub`, `mul`, `div`, `relu`, `exp`, `gelu`, `sqrt`,
    /// or `scale:<factor>`.
    fn from_str(s: &str) -> Result<Self> {
        let op = match s {
            "add" => ElementwiseOp::Add,
            "sub" => ElementwiseOp::Sub,
            "mul" => ElementwiseOp::Mul,
            "div" => ElementwiseOp::Div,
            "relu" => ElementwiseOp::Relu,
            "exp" => ElementwiseOp::Exp,
            "gelu" => ElementwiseOp::Gelu,
            "sqrt" => ElementwiseOp::Sqrt,
            other => match other.strip_prefix("scale:").map(str::parse::<f64>) {
                Some(Ok(c)) => ElementwiseOp::Scale(c),
                _ => return Err(Error::UnknownOp(other.to_string())),
            },
        };
        Ok(op)
    }
}

impl fmt::Display for ElementwiseOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementwiseOp::Add => f.write_str("add"),
            ElementwiseOp::Sub => f.write_str("sub"),
            ElementwiseOp::Mul => f.write_str("mul"),
            ElementwiseOp::Div => f.write_str("div"),
            ElementwiseOp::Relu => f.write_str("relu"),
            ElementwiseOp::Exp => f.write_str("exp"),
            ElementwiseOp::Gelu => f.write_str("gelu"),
            ElementwiseOp::Sqrt => f.write_str("sqrt"),
            ElementwiseOp::Scale(c) => write!(f, "scale:{c}"),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes (right-aligned, size-1 dims stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` laid over `out`, zero along broadcast axes.
fn broadcast_strides(out: &[usize], input: &[usize]) -> Vec<usize> {
    let off = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut s = 1;
    for ax in (0..input.len()).rev() {
        if input[ax] != 1 {
            strides[ax + off] = s;
        }
        s *= input[ax];
    }
    strides
}

/// Calls `f(out_offset, a_offset, b_offset)` for every output element.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let sa = broadcast_strides(out, a);
    let sb = broadcast_strides(out, b);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        if rank == 0 {
            break;
        }
        let mut ax = rank - 1;
        idx[ax] += 1;
        oa += sa[ax];
        ob += sb[ax];
        while idx[ax] == out[ax] && ax > 0 {
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
        }
    }
}

pub(crate) fn elementwise(op: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    match (op.is_binary(), b) {
        (true, Some(b)) => binary(op, a, b),
        (true, None) => Err(Error::invalid(format!("`{op}` needs two operands"))),
        (false, None) => Ok(a.map(|v| op.unary(v))),
        (false, Some(_)) => Err(Error::invalid(format!("`{op}` takes one operand"))),
    }
}

fn binary(op: ElementwiseOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.binary(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape("broadcast", a.shape(), b.shape()))?;
    let mut data = vec![0.0; shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
        data[o] = op.binary(ad[ia], bd[ib]);
    });
    Ok(Tensor::from_parts(shape, data))
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    Ok(Tensor::from_parts(
        vec![m, n],
        matmul_raw(a.data(), b.data(), m, k, n),
    ))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((m, k, n)),
        _ => Err(Error::shape("matmul", a, b)),
    }
}

/// C = A·B for row-major A (m,k), B (k,n).
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for (crow, arow) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// dA = dC·Bᵀ.
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for (darow, grow) in da.chunks_exact_mut(k).zip(g.chunks_exact(n)) {
        for (dv, brow) in darow.iter_mut().zip(b.chunks_exact(n)) {
            *dv = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    da
}

/// dB = Aᵀ·dC.
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m) {
        for (&av, dbrow) in arow.iter().zip(db.chunks_exact_mut(n)) {
            for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                *dv += av * gv;
            }
        }
    }
    db
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    let &[m, n] = a.shape() else {
        return Err(Error::invalid(format!(
            "transpose needs a matrix, got {:?}",
            a.shape()
        )));
    };
    Ok(Tensor::from_parts(vec![n, m], transpose_raw(a.data(), m, n)))
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Axis helpers
// ---------------------------------------------------------------------------

/// (outer, n, inner) decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = f64::NEG_INFINITY;
            for t in 0..n {
                max = max.max(xd[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..n {
                let e = (xd[base + t * inner] - max).exp();
                out[base + t * inner] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for t in 0..n {
                out[base + t * inner] *= inv;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// dx = y ⊙ (g − Σ_axis g⊙y).
pub(crate) fn softmax_backward(y: &Tensor, g: &[f64], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(y.shape(), axis).expect("validated in forward");
    let yd = y.data();
    let mut dx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: f64 = (0..n)
                .map(|t| g[base + t * inner] * yd[base + t * inner])
                .sum();
            for t in 0..n {
                let at = base + t * inner;
                dx[at] = yd[at] * (g[at] - dot);
            }
        }
    }
    dx
}

/// Sum over one axis, keeping it with size 1.
pub(crate) fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for t in 0..n {
            let src = &xd[(o * n + t) * inner..(o * n + t + 1) * inner];
            for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *dst += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    for p in parts {
        let ok = p.rank() == rank
            && (0..rank).all(|ax| ax == axis || p.shape()[ax] == first.shape()[ax]);
        if !ok {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    if len == 0 || start + len > n {
        return Err(Error::invalid(format!(
            "narrow [{start}, {}) out of range for axis of size {n}",
            start + len
        )));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

// ---------------------------------------------------------------------------
// Layer normalization
// ---------------------------------------------------------------------------

pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Normalizes the last axis, then applies `gamma`/`beta`.
pub(crate) fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if !(eps > 0.0) {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("layer_norm on a scalar"))?;
    if gamma.len() != d || gamma.rank() != 1 {
        return Err(Error::shape("layer_norm gamma", x.shape(), gamma.shape()));
    }
    if beta.len() != d || beta.rank() != 1 {
        return Err(Error::shape("layer_norm beta", x.shape(), beta.shape()));
    }
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gamma.data()[c] + beta.data()[c];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        LayerNormCache { xhat, inv_std },
    ))
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = gamma.len();
    let rows = cache.inv_std.len();
    let mut dx = vec![0.0; rows * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut gh = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let (mut mean_gh, mut mean_ghx) = (0.0, 0.0);
        for c in 0..d {
            dgamma[c] += gr[c] * xh[c];
            dbeta[c] += gr[c];
            gh[c] = gr[c] * gamma[c];
            mean_gh += gh[c];
            mean_ghx += gh[c] * xh[c];
        }
        mean_gh /= d as f64;
        mean_ghx /= d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            dx[r * d + c] = is * (gh[c] - mean_gh - xh[c] * mean_ghx);
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Bilinear resizing
// ---------------------------------------------------------------------------

pub(crate) fn validate_resize(shape: &[usize], axes: &[usize], sizes: &[usize]) -> Result<()> {
    if axes.len() != sizes.len() {
        return Err(Error::invalid(format!(
            "{} resize axes but {} target sizes",
            axes.len(),
            sizes.len()
        )));
    }
    for (i, &a) in axes.iter().enumerate() {
        if a >= shape.len() {
            return Err(Error::InvalidAxis {
                axis: a,
                rank: shape.len(),
            });
        }
        if axes[..i].contains(&a) {
            return Err(Error::invalid(format!("resize axis {a} listed twice")));
        }
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::invalid("resize target sizes must be positive"));
    }
    Ok(())
}

/// Source taps (lo, hi, weight of hi) for each output sample, using the
/// align-corners-false convention: output sample o sits at source
/// coordinate (o + 0.5)·n/m − 0.5, clamped to the valid range.
pub(crate) fn linear_taps(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let w = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, w)
        })
        .collect()
}

pub(crate) fn resize_axis(x: &Tensor, axis: usize, size: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis).expect("validated axis");
    if n == size {
        return x.clone();
    }
    let taps = linear_taps(n, size);
    let xd = x.data();
    let mut out = vec![0.0; outer * size * inner];
    for o in 0..outer {
        for (t, &(lo, hi, w)) in taps.iter().enumerate() {
            let dst = &mut out[(o * size + t) * inner..(o * size + t + 1) * inner];
            let a = &xd[(o * n + lo) * inner..(o * n + lo + 1) * inner];
            let b = &xd[(o * n + hi) * inner..(o * n + hi + 1) * inner];
            for ((d, &av), &bv) in dst.iter_mut().zip(a).zip(b) {
                *d = (1.0 - w) * av + w * bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = size;
    Tensor::from_parts(shape, out)
}

/// Adjoint of [`resize_axis`].
pub(crate) fn resize_axis_backward(g: &[f64], in_shape: &[usize], axis: usize, size: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(in_shape, axis).expect("validated axis");
    if n == size {
        return g.to_vec();
    }
    let taps = linear_taps(n, size);
    let mut dx = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for (t, &(lo, hi, w)) in taps.iter().enumerate() {
            let src = &g[(o * size + t) * inner..(o * size + t + 1) * inner];
            for (c, &gv) in src.iter().enumerate() {
                dx[(o * n + lo) * inner + c] += (1.0 - w) * gv;
                dx[(o * n + hi) * inner + c] += w * gv;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Row normalization and rotations
// ---------------------------------------------------------------------------

/// Divides each last-axis row by max(‖row‖₂, eps). Returns the output and
/// the per-row divisor.
pub(crate) fn normalize_rows(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("normalize_rows on a scalar"))?;
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in out.chunks_exact_mut(d) {
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= nrm;
        }
        norms.push(nrm);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), norms))
}

pub(crate) fn normalize_rows_backward(y: &Tensor, norms: &[f64], eps: f64, g: &[f64]) -> Vec<f64> {
    let d = *y.shape().last().expect("rank checked in forward");
    let mut dx = vec![0.0; g.len()];
    for (r, &nrm) in norms.iter().enumerate() {
        let yr = &y.data()[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let dxr = &mut dx[r * d..(r + 1) * d];
        if nrm > eps {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for c in 0..d {
                dxr[c] = (gr[c] - yr[c] * dot) / nrm;
            }
        } else {
            for c in 0..d {
                dxr[c] = gr[c] / eps;
            }
        }
    }
    dx
}

/// Rotates interleaved pairs (2p, 2p+1) of each row by the angle whose
/// cosine/sine are stored at `[row, p]`. `inverse` applies the transpose.
pub(crate) fn rotate_pairs(x: &[f64], cos: &[f64], sin: &[f64], d: usize, inverse: bool) -> Vec<f64> {
    let half = d / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = vec![0.0; x.len()];
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        for p in 0..half {
            let c = cos[r * half + p];
            let s = sign * sin[r * half + p];
            let (a, b) = (xr[2 * p], xr[2 * p + 1]);
            or[2 * p] = a * c - b * s;
            or[2 * p + 1] = a * s + b * c;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[5, 3], &[3]), Some(vec![5, 3]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn parse_op_kinds() {
        assert_eq!("relu".parse::<ElementwiseOp>().unwrap(), ElementwiseOp::Relu);
        assert_eq!(
            "scale:0.5".parse::<ElementwiseOp>().unwrap(),
            ElementwiseOp::Scale(0.5)
        );
        assert!(matches!(
            "tanh".parse::<ElementwiseOp>(),
            Err(Error::UnknownOp(_))
        ));
        assert!(matches!(
            "scale:x".parse::<ElementwiseOp>(),
            Err(Error::UnknownOp(_))
        ));
    }

    #[test]
    fn taps_identity_and_constant() {
        for (o, &(lo, hi, w)) in linear_taps(4, 4).iter().enumerate() {
            assert_eq!((lo, w), (o, 0.0));
            assert!(hi <= 3);
        }
        assert!(linear_taps(1, 3).iter().all(|&(lo, hi, _)| lo == 0 && hi == 0));
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
