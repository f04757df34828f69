//! Match-to-match attention: every entry of the 4D correlation map is one
//! token, embedded from its L layer-wise scores and refined by a stack of
//! pre-LN blocks built on linear-complexity additive attention.

pub mod checkpoint;
mod layers;
pub mod params;
pub mod rope;

pub use layers::{
    additive_attention_head, attention_block, mhsa_tm, mlp, refine, vanilla_attention_head,
    Refiner, DEFAULT_VANILLA_CEILING,
};
pub use params::{
    BlockParams, HeadParams, LayerNormParams, MhsaParams, MlpParams, RefinerConfig,
    RefinerParams, StackConfig,
};
pub use rope::{
    rope_rotate, AxisAssignment, AxisPartition, PositionAxis, Positions, RopeConfig, RopeMode,
    RopeTable,
};

use crate::correlation::MultiChannelCorrelation;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// A (T, D) token matrix with the correlation grid it was flattened from.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchEmbedding {
    pub values: Tensor,
    pub grid_size: (usize, usize),
}

impl MatchEmbedding {
    pub fn new(values: Tensor, grid_size: (usize, usize)) -> Result<Self> {
        let (h, w) = grid_size;
        match values.shape() {
            &[t, _] if t == h * w * h * w => Ok(MatchEmbedding { values, grid_size }),
            s => Err(Error::invalid(format!(
                "embedding {s:?} does not have H·W·H·W = {} rows",
                h * w * h * w
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Flattens (L, H, W, H, W) into a (T, L) token matrix; token
/// t = ((i·W + j)·H + k)·W + l holds the L scores of match (i, j, k, l).
pub fn flatten_correlation(c: &MultiChannelCorrelation) -> MatchEmbedding {
    let out = flatten_correlation_var(&Var::constant(c.values.clone()))
        .expect("multi-channel correlation has rank 5");
    MatchEmbedding {
        values: out.value().clone(),
        grid_size: c.grid_size(),
    }
}

pub fn flatten_correlation_var(c: &Var) -> Result<Var> {
    let &[l, h, w, h2, w2] = c.shape() else {
        return Err(Error::invalid(format!(
            "expected (L, H, W, H, W), got {:?}",
            c.shape()
        )));
    };
    c.reshape(&[l, h * w * h2 * w2])?.transpose()
}

/// Inverse of [`flatten_correlation`].
pub fn unflatten_correlation(x: &MatchEmbedding) -> Result<MultiChannelCorrelation> {
    let (h, w) = x.grid_size;
    let l = x.width();
    let back = x.values.transpose()?.reshape(&[l, h, w, h, w])?;
    MultiChannelCorrelation::new(back)
}

/// X = Cᵀ·W_in.
pub fn embed_channels(x: &MatchEmbedding, w_in: &Tensor) -> Result<MatchEmbedding> {
    let out = x.values.matmul(w_in)?;
    MatchEmbedding::new(out, x.grid_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_corr(shape: &[usize], seed: u64) -> MultiChannelCorrelation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiChannelCorrelation::new(Tensor::rand_uniform(shape, 0.0, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn single_match_flattens_to_one_token() {
        let c = random_corr(&[1, 1, 1, 1, 1], 0);
        assert_eq!(flatten_correlation(&c).values.shape(), &[1, 1]);
    }

    #[test]
    fn flatten_unflatten_is_identity() {
        let c = random_corr(&[2, 3, 3, 3, 3], 1);
        let back = unflatten_correlation(&flatten_correlation(&c)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flatten_index_formula() {
        let c = random_corr(&[2, 2, 2, 2, 2], 2);
        let x = flatten_correlation(&c);
        let (h, w) = (2, 2);
        for ch in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..h {
                        for l in 0..w {
                            let row = ((i * w + j) * h + k) * w + l;
                            assert_eq!(x.values.at(&[row, ch]), c.values.at(&[ch, i, j, k, l]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_and_selection_embeddings() {
        let c = random_corr(&[3, 2, 2, 2, 2], 3);
        let x = flatten_correlation(&c);
        assert_eq!(embed_channels(&x, &Tensor::eye(3)).unwrap(), x);
        let mut pick = Tensor::zeros(&[3, 1]);
        pick.set(&[2, 0], 1.0);
        let e = embed_channels(&x, &pick).unwrap();
        for t in 0..x.len() {
            assert_eq!(e.values.at(&[t, 0]), x.values.at(&[t, 2]));
        }
        assert!(embed_channels(&x, &Tensor::zeros(&[2, 4])).is_err());
    }
}
