use rand::Rng;

use super::params::{
    BlockParams, HeadParams, MhsaParams, MlpParams, RefinerConfig, RefinerParams, StackConfig,
};
use super::rope::{Positions, RopeMode, RopeTable};
use super::flatten_correlation_var;
use crate::correlation::{Correlation4D, MultiChannelCorrelation};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Largest sequence the quadratic baseline will materialize by default.
pub const DEFAULT_VANILLA_CEILING: usize = 4096;

fn check_input(x: &Var, head: &HeadParams<Var>) -> Result<usize> {
    let &[t, d_in] = x.shape() else {
        return Err(Error::invalid(format!("attention input must be (T, D_in), got {:?}", x.shape())));
    };
    if head.w_q.shape()[0] != d_in {
        return Err(Error::shape("attention projection", x.shape(), head.w_q.shape()));
    }
    if head.w_v.shape() != head.w_q.shape() || head.w_k.shape() != head.w_q.shape() {
        return Err(Error::shape("attention projections", head.w_q.shape(), head.w_v.shape()));
    }
    Ok(t)
}

/// Softmax-pooled summary Σ_j X_j · softmax(τ·X·w)_j of a (T, D) matrix,
/// returned as (1, D).
fn pool(x: &Var, w: &Var, tau: f64) -> Result<Var> {
    let d = x.shape()[1];
    let weights = x.matmul(&w.reshape(&[d, 1])?)?.scale(tau).softmax(0)?;
    weights.transpose()?.matmul(x)
}

/// One head of additive attention. With a rotary table, Q and K are rotated
/// by their match positions before pooling. Linear in T.
pub fn additive_attention_head(
    x: &Var,
    head: &HeadParams<Var>,
    rope: Option<&RopeTable>,
    tau: f64,
) -> Result<Var> {
    check_input(x, head)?;
    let mut q = x.matmul(&head.w_q)?;
    let mut k = x.matmul(&head.w_k)?;
    let v = x.matmul(&head.w_v)?;
    if let Some(table) = rope {
        q = table.apply(&q)?;
        k = table.apply(&k)?;
    }
    let global_q = pool(&q, &head.q_pool, tau)?;
    let h = k.mul(&global_q)?;
    let global_k = pool(&h, &head.k_pool, tau)?;
    v.mul(&global_k)
}

/// Quadratic softmax(τ·Q·Kᵀ)·V baseline; refuses sequences above `ceiling`.
pub fn vanilla_attention_head(
    x: &Var,
    head: &HeadParams<Var>,
    tau: f64,
    ceiling: usize,
) -> Result<Var> {
    let t = check_input(x, head)?;
    if t > ceiling {
        return Err(Error::CeilingExceeded { len: t, ceiling });
    }
    let q = x.matmul(&head.w_q)?;
    let k = x.matmul(&head.w_k)?;
    let v = x.matmul(&head.w_v)?;
    q.matmul(&k.transpose()?)?.scale(tau).softmax(1)?.matmul(&v)
}

/// concat_h[head_h(X)]·W_O + b_O.
pub fn mhsa_tm(x: &Var, attn: &MhsaParams<Var>, rope: Option<&RopeTable>, tau: f64) -> Result<Var> {
    if attn.heads.is_empty() {
        return Err(Error::invalid("multi-head attention needs at least one head"));
    }
    let heads = attn
        .heads
        .iter()
        .map(|h| additive_attention_head(x, h, rope, tau))
        .collect::<Result<Vec<_>>>()?;
    let cat = if heads.len() == 1 {
        heads.into_iter().next().expect("one head")
    } else {
        Var::concat(&heads, 1)?
    };
    cat.matmul(&attn.w_o)?.add(&attn.b_o)
}

/// Two affine layers with a GELU in between.
pub fn mlp(x: &Var, p: &MlpParams<Var>) -> Result<Var> {
    x.matmul(&p.w1)?.add(&p.b1)?.gelu().matmul(&p.w2)?.add(&p.b2)
}

/// Pre-LN block: y = x + MHSA(LN(x)); z = y + MLP(LN(y)).
pub fn attention_block(
    x: &Var,
    block: &BlockParams<Var>,
    rope: Option<&RopeTable>,
    stack: &StackConfig,
) -> Result<Var> {
    let a = x.layer_norm(&block.ln1.gamma, &block.ln1.beta, stack.ln_eps)?;
    let attended = mhsa_tm(&a, &block.attn, rope, stack.tau_attn)?;
    if attended.shape() != x.shape() {
        return Err(Error::shape("residual", x.shape(), attended.shape()));
    }
    let y = x.add(&attended)?;
    let b = y.layer_norm(&block.ln2.gamma, &block.ln2.beta, stack.ln_eps)?;
    y.add(&mlp(&b, &block.mlp)?)
}

/// (L, H, W, H, W) → flatten → embed → N blocks → single channel →
/// (H, W, H, W) → bilinear ×2 upsampling to (2H, 2W, 2H, 2W).
pub fn refine(
    c: &Var,
    params: &RefinerParams<Var>,
    cfg: &RefinerConfig,
    rope: Option<&RopeTable>,
) -> Result<Var> {
    let &[l, h, w, _, _] = c.shape() else {
        return Err(Error::invalid(format!("refine expects (L, H, W, H, W), got {:?}", c.shape())));
    };
    if l != params.w_in.shape()[0] {
        return Err(Error::shape("refine channels", c.shape(), params.w_in.shape()));
    }
    let t = h * w * h * w;
    let mut x = flatten_correlation_var(c)?.matmul(&params.w_in)?;
    if let Some(table) = &params.pos_table {
        if table.shape()[0] != t {
            return Err(Error::shape("positional table", table.shape(), x.shape()));
        }
        x = x.add(table)?;
    }
    let rope = match cfg.rope.mode {
        RopeMode::Rotary => {
            let table = rope.ok_or_else(|| Error::invalid("rotary mode needs a rotation table"))?;
            if table.rows() != t {
                return Err(Error::invalid(format!(
                    "rotation table has {} rows, sequence has {t}",
                    table.rows()
                )));
            }
            Some(table)
        }
        _ => None,
    };
    for block in &params.blocks {
        x = attention_block(&x, block, rope, &cfg.stack)?;
    }
    let single = x.matmul(&params.w_out)?.add(&params.b_out)?;
    single
        .reshape(&[h, w, h, w])?
        .bilinear_resize(&[0, 1, 2, 3], &[2 * h, 2 * w, 2 * h, 2 * w])
}

/// A configured refinement stack and its parameters.
#[derive(Clone, Debug)]
pub struct Refiner {
    cfg: RefinerConfig,
    params: RefinerParams<Tensor>,
    rope: Option<RopeTable>,
}

impl Refiner {
    pub fn init(cfg: RefinerConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = RefinerParams::init(&cfg, rng)?;
        Refiner::new(cfg, params)
    }

    /// Validates every parameter shape against what `cfg` implies.
    pub fn new(cfg: RefinerConfig, params: RefinerParams<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let want = RefinerParams::build(&cfg, |_, shape| shape.to_vec()).flat_shapes();
        let got = params.flat();
        if want.len() != got.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, ws), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || ws.as_slice() != gt.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {gn} has shape {:?}, config implies {wn} {ws:?}",
                    gt.shape(),
                )));
            }
            if !gt.is_finite() {
                return Err(Error::Checkpoint(format!("parameter {gn} is not finite")));
            }
        }
        let rope = Self::table_for(&cfg, cfg.grid)?;
        Ok(Refiner { cfg, params, rope })
    }

    fn table_for(cfg: &RefinerConfig, grid: (usize, usize)) -> Result<Option<RopeTable>> {
        if cfg.rope.mode != RopeMode::Rotary {
            return Ok(None);
        }
        let positions = Positions::for_grid(grid.0, grid.1);
        RopeTable::new(&positions, &cfg.rope, cfg.stack.d_head).map(Some)
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &RefinerParams<Tensor> {
        &self.params
    }

    pub fn set_params(&mut self, params: RefinerParams<Tensor>) -> Result<()> {
        let _ = self.params.with_values(params.flat().into_iter().map(|(_, t)| t).collect())?;
        self.params = params;
        Ok(())
    }

    pub fn rope_table(&self) -> Option<&RopeTable> {
        self.rope.as_ref()
    }

    /// Forward pass with caller-bound parameters (trainable or constant).
    pub fn forward(&self, c: &Var, params: &RefinerParams<Var>) -> Result<Var> {
        let grid = (c.shape().get(1).copied().unwrap_or(0), c.shape().get(2).copied().unwrap_or(0));
        if grid == self.cfg.grid {
            refine(c, params, &self.cfg, self.rope.as_ref())
        } else {
            let table = Self::table_for(&self.cfg, grid)?;
            refine(c, params, &self.cfg, table.as_ref())
        }
    }

    /// Inference on a plain correlation; intermediates are freed as the
    /// pass proceeds.
    pub fn refine(&self, c: &MultiChannelCorrelation) -> Result<Correlation4D> {
        let out = self.forward(&Var::constant(c.values.clone()), &self.params.to_constants())?;
        Correlation4D::new(out.value().clone())
    }
}
