//! Configuration and parameter containers for the refinement stack.
//!
//! Parameter containers are generic over the leaf type so the same layout
//! serves plain tensors (storage, checkpoints, optimizer state), autodiff
//! variables (a forward pass) and shapes (checkpoint validation).

use std::convert::Infallible;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rope::{RopeConfig, RopeMode};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    /// Number of attention blocks N.
    pub depth: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_in: usize,
    pub mlp_hidden: usize,
    pub tau_attn: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl StackConfig {
    /// D_in = N_h·D_h, MLP width 4·D_in, τ = 1/√D_h.
    pub fn new(depth: usize, n_heads: usize, d_head: usize) -> Self {
        let d_in = n_heads * d_head;
        StackConfig {
            depth,
            n_heads,
            d_head,
            d_in,
            mlp_hidden: 4 * d_in,
            tau_attn: 1.0 / (d_head as f64).sqrt(),
            ln_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_head == 0 || self.d_in == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("stack dimensions must be positive"));
        }
        if self.d_in != self.n_heads * self.d_head {
            return Err(Error::invalid(format!(
                "D_in ({}) must equal N_h·D_h ({}·{})",
                self.d_in, self.n_heads, self.d_head
            )));
        }
        if !(self.tau_attn > 0.0 && self.tau_attn.is_finite()) {
            return Err(Error::invalid("tau_attn must be positive"));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::invalid("layer-norm eps must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to build a refiner for a given correlation layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    /// Correlation channels L.
    pub channels: usize,
    /// Correlation grid (H, W).
    pub grid: (usize, usize),
    pub stack: StackConfig,
    pub rope: RopeConfig,
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::invalid("channels and grid must be positive"));
        }
        self.stack.validate()?;
        self.rope.validate(self.stack.d_head)
    }

    pub fn sequence_len(&self) -> usize {
        let (h, w) = self.grid;
        h * w * h * w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    /// Query pooling vector w_q (D_h).
    pub q_pool: P,
    /// Key pooling vector w_k (D_h).
    pub k_pool: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhsaParams<P> {
    pub heads: Vec<HeadParams<P>>,
    pub w_o: P,
    pub b_o: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gamma: P,
    pub beta: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub ln1: LayerNormParams<P>,
    pub attn: MhsaParams<P>,
    pub ln2: LayerNormParams<P>,
    pub mlp: MlpParams<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerParams<P> {
    pub w_in: P,
    /// Learned (T, D_in) table, present in absolute positional mode.
    pub pos_table: Option<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub w_out: P,
    pub b_out: P,
}

macro_rules! try_map_fields {
    ($src:expr, $prefix:expr, $f:expr, $ty:ident { $($field:ident),* $(,)? }) => {
        $ty { $($field: $f(&format!("{}.{}", $prefix, stringify!($field)), &$src.$field)?,)* }
    };
}

impl<P> HeadParams<P> {
    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<HeadParams<Q>, E> {
        Ok(try_map_fields!(self, prefix, f, HeadParams { w_q, w_k, w_v, q_pool, k_pool }))
    }
}

impl<P> LayerNormParams<P> {
    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<LayerNormParams<Q>, E> {
        Ok(try_map_fields!(self, prefix, f, LayerNormParams { gamma, beta }))
    }
}

impl<P> MlpParams<P> {
    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<MlpParams<Q>, E> {
        Ok(try_map_fields!(self, prefix, f, MlpParams { w1, b1, w2, b2 }))
    }
}

impl<P> MhsaParams<P> {
    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<MhsaParams<Q>, E> {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, head)| head.try_map(&format!("{prefix}.heads.{h}"), f))
            .collect::<Result<Vec<_>, E>>()?;
        Ok(MhsaParams {
            heads,
            w_o: f(&format!("{prefix}.w_o"), &self.w_o)?,
            b_o: f(&format!("{prefix}.b_o"), &self.b_o)?,
        })
    }
}

impl<P> BlockParams<P> {
    pub fn try_map<Q, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<BlockParams<Q>, E> {
        Ok(BlockParams {
            ln1: self.ln1.try_map(&format!("{prefix}.ln1"), f)?,
            attn: self.attn.try_map(&format!("{prefix}.attn"), f)?,
            ln2: self.ln2.try_map(&format!("{prefix}.ln2"), f)?,
            mlp: self.mlp.try_map(&format!("{prefix}.mlp"), f)?,
        })
    }
}

impl<P> RefinerParams<P> {
    /// Visits every parameter in a fixed order with its dotted name.
    pub fn try_map<Q, E>(&self, f: &mut impl FnMut(&str, &P) -> Result<Q, E>) -> Result<RefinerParams<Q>, E> {
        let w_in = f("w_in", &self.w_in)?;
        let pos_table = match &self.pos_table {
            Some(p) => Some(f("pos_table", p)?),
            None => None,
        };
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(b, block)| block.try_map(&format!("blocks.{b}"), f))
            .collect::<Result<Vec<_>, E>>()?;
        Ok(RefinerParams {
            w_in,
            pos_table,
            blocks,
            w_out: f("w_out", &self.w_out)?,
            b_out: f("b_out", &self.b_out)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> RefinerParams<Q> {
        self.try_map(&mut |n, p| Ok::<_, Infallible>(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(n.to_string()));
        names
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    /// N(0, (1/√fan_in)²) with fan_in the number of rows.
    Projection,
    /// Pooling vector, N(0, (1/√len)²).
    Pooling,
    /// Learned positional table, N(0, 0.02²).
    PositionTable,
    Zeros,
    Ones,
    /// Every entry 1/rows.
    Average,
}

impl<P> RefinerParams<P> {
    /// Lays out every parameter of `cfg`, creating each with `make`.
    pub fn build(cfg: &RefinerConfig, mut make: impl FnMut(InitKind, &[usize]) -> P) -> Self {
        let s = &cfg.stack;
        let w_in = make(InitKind::Projection, &[cfg.channels, s.d_in]);
        let pos_table = (cfg.rope.mode == RopeMode::AbsoluteLearned)
            .then(|| make(InitKind::PositionTable, &[cfg.sequence_len(), s.d_in]));
        let mut blocks = Vec::with_capacity(s.depth);
        for _ in 0..s.depth {
            let ln1 = LayerNormParams {
                gamma: make(InitKind::Ones, &[s.d_in]),
                beta: make(InitKind::Zeros, &[s.d_in]),
            };
            let heads = (0..s.n_heads)
                .map(|_| HeadParams {
                    w_q: make(InitKind::Projection, &[s.d_in, s.d_head]),
                    w_k: make(InitKind::Projection, &[s.d_in, s.d_head]),
                    w_v: make(InitKind::Projection, &[s.d_in, s.d_head]),
                    q_pool: make(InitKind::Pooling, &[s.d_head]),
                    k_pool: make(InitKind::Pooling, &[s.d_head]),
                })
                .collect();
            let attn = MhsaParams {
                heads,
                w_o: make(InitKind::Projection, &[s.n_heads * s.d_head, s.d_in]),
                b_o: make(InitKind::Zeros, &[s.d_in]),
            };
            let ln2 = LayerNormParams {
                gamma: make(InitKind::Ones, &[s.d_in]),
                beta: make(InitKind::Zeros, &[s.d_in]),
            };
            let mlp = MlpParams {
                w1: make(InitKind::Projection, &[s.d_in, s.mlp_hidden]),
                b1: make(InitKind::Zeros, &[s.mlp_hidden]),
                w2: make(InitKind::Projection, &[s.mlp_hidden, s.d_in]),
                b2: make(InitKind::Zeros, &[s.d_in]),
            };
            blocks.push(BlockParams { ln1, attn, ln2, mlp });
        }
        RefinerParams {
            w_in,
            pos_table,
            blocks,
            w_out: make(InitKind::Average, &[s.d_in, 1]),
            b_out: make(InitKind::Zeros, &[1]),
        }
    }
}

impl RefinerParams<Tensor> {
    /// Initializes parameters: projections ~ N(0, (1/√fan_in)²), biases 0,
    /// layer norms γ = 1, β = 0, output projection = uniform channel average.
    pub fn init(cfg: &RefinerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg, |kind, shape| match kind {
            InitKind::Projection => Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng),
            InitKind::Pooling => Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng),
            InitKind::PositionTable => Tensor::randn(shape, 0.02, rng),
            InitKind::Zeros => Tensor::zeros(shape),
            InitKind::Ones => Tensor::ones(shape),
            InitKind::Average => Tensor::full(shape, 1.0 / shape[0] as f64),
        }))
    }

    pub fn shapes(&self) -> RefinerParams<Vec<usize>> {
        self.map(|_, t| t.shape().to_vec())
    }

    pub fn to_vars(&self) -> RefinerParams<Var> {
        self.map(|_, t| Var::param(t.clone()))
    }

    pub fn to_constants(&self) -> RefinerParams<Var> {
        self.map(|_, t| Var::constant(t.clone()))
    }

    pub fn flat(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.map(|n, t| out.push((n.to_string(), t.clone())));
        out
    }

    /// Rebuilds the same layout from values given in visiting order.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        let mut iter = values.into_iter();
        let out = self.try_map(&mut |name, old: &Tensor| {
            let t = iter
                .next()
                .ok_or_else(|| Error::invalid(format!("missing value for {name}")))?;
            if t.shape() != old.shape() {
                return Err(Error::shape("parameter", old.shape(), t.shape()));
            }
            Ok(t)
        })?;
        if iter.next().is_some() {
            return Err(Error::invalid("more values than parameters"));
        }
        Ok(out)
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.map(|_, t| n += t.len());
        n
    }
}

impl RefinerParams<Vec<usize>> {
    pub fn flat_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.map(|n, s| out.push((n.to_string(), s.clone())));
        out
    }
}

impl RefinerParams<Var> {
    /// Gradients of every leaf (zero where backward never reached).
    pub fn grads(&self) -> RefinerParams<Tensor> {
        self.map(|_, v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
    }
}
