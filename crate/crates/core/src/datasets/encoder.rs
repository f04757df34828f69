//! A tiny trainable feature encoder: per-position affine layers with ReLU
//! between them, every layer's output exposed as one feature map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::{FeatureMap, FeatureStack};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_depth: usize,
    /// Output width of each layer; the layer count is its length.
    pub widths: Vec<usize>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.input_depth == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("encoder needs at least one layer and positive widths"));
        }
        Ok(())
    }

    fn fan_ins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(self.input_depth)
            .chain(self.widths.iter().copied())
            .zip(self.widths.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub weights: Vec<P>,
    pub biases: Vec<P>,
}

impl EncoderParams<Tensor> {
    /// Square layers start at the identity plus N(0, 0.01²) noise, others
    /// at N(0, 1/fan_in); biases start at zero.
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (d_in, d_out) in cfg.fan_ins() {
            let w = if d_in == d_out {
                Tensor::eye(d_in).add(&Tensor::randn(&[d_in, d_out], 0.01, rng))?
            } else {
                Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)
            };
            weights.push(w);
            biases.push(Tensor::zeros(&[d_out]));
        }
        Ok(EncoderParams { weights, biases })
    }

    pub fn identity(depth: usize, layers: usize) -> Self {
        EncoderParams {
            weights: vec![Tensor::eye(depth); layers],
            biases: vec![Tensor::zeros(&[depth]); layers],
        }
    }

    pub fn to_vars(&self) -> EncoderParams<Var> {
        EncoderParams {
            weights: self.weights.iter().cloned().map(Var::param).collect(),
            biases: self.biases.iter().cloned().map(Var::param).collect(),
        }
    }

    pub fn to_constants(&self) -> EncoderParams<Var> {
        EncoderParams {
            weights: self.weights.iter().cloned().map(Var::constant).collect(),
            biases: self.biases.iter().cloned().map(Var::constant).collect(),
        }
    }

    /// Parameters in (w0, b0, w1, b1, ...) order.
    pub fn flat(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("encoder.{l}.weight"), w.clone()));
            out.push((format!("encoder.{l}.bias"), b.clone()));
        }
        out
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        cfg.validate()?;
        if self.weights.len() != cfg.widths.len() || self.biases.len() != cfg.widths.len() {
            return Err(Error::invalid("encoder layer count differs from its config"));
        }
        for ((d_in, d_out), (w, b)) in cfg.fan_ins().zip(self.weights.iter().zip(&self.biases)) {
            if w.shape() != [d_in, d_out] || b.shape() != [d_out] {
                return Err(Error::shape("encoder layer", &[d_in, d_out], w.shape()));
            }
        }
        Ok(())
    }
}

impl EncoderParams<Var> {
    pub fn grads(&self) -> EncoderParams<Tensor> {
        let g = |v: &Var| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
        EncoderParams {
            weights: self.weights.iter().map(g).collect(),
            biases: self.biases.iter().map(g).collect(),
        }
    }
}

/// Encodes a (H, W, D) input into one (H, W, width_l) map per layer.
pub fn encoder_forward_var(x: &Var, params: &EncoderParams<Var>) -> Result<Vec<Var>> {
    let &[h, w, d] = x.shape() else {
        return Err(Error::invalid(format!("encoder input must be (H, W, D), got {:?}", x.shape())));
    };
    if params.weights.is_empty() || params.weights.len() != params.biases.len() {
        return Err(Error::invalid("encoder needs matching weights and biases"));
    }
    let mut cur = x.reshape(&[h * w, d])?;
    let mut outs = Vec::with_capacity(params.weights.len());
    for (l, (wt, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        if l > 0 {
            cur = cur.relu();
        }
        cur = cur.matmul(wt)?.add(b)?;
        outs.push(cur.reshape(&[h, w, wt.shape()[1]])?);
    }
    Ok(outs)
}

pub fn encoder_forward(
    input: &FeatureMap,
    cfg: &EncoderConfig,
    params: &EncoderParams<Tensor>,
) -> Result<FeatureStack> {
    params.check(cfg)?;
    if input.depth() != cfg.input_depth {
        return Err(Error::shape("encoder input", &[cfg.input_depth], &[input.depth()]));
    }
    let outs = encoder_forward_var(&Var::constant(input.values.clone()), &params.to_constants())?;
    let maps = outs
        .into_iter()
        .enumerate()
        .map(|(l, v)| FeatureMap::new(v.value().clone(), l, input.source_size))
        .collect::<Result<Vec<_>>>()?;
    FeatureStack::new(maps)
}
