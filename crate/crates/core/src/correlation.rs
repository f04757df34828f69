//! Per-layer 4D cosine correlation and multi-channel assembly.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Denominator guard for zero-norm feature vectors.
pub const NORM_EPS: f64 = 1e-12;

/// A (H, W, D) feature map from one layer of a feature provider.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub layer_id: usize,
    /// (width, height) of the image the map was computed from, in pixels.
    pub source_size: (usize, usize),
}

impl FeatureMap {
    pub fn new(values: Tensor, layer_id: usize, source_size: (usize, usize)) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::invalid(format!(
                "feature map must be (H, W, D), got {:?}",
                values.shape()
            )));
        }
        Ok(FeatureMap {
            values,
            layer_id,
            source_size,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn depth(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Feature maps of one image, one per layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    maps: Vec<FeatureMap>,
}

impl FeatureStack {
    pub fn new(maps: Vec<FeatureMap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Empty("feature stack"));
        }
        for (i, m) in maps.iter().enumerate() {
            if maps[..i].iter().any(|o| o.layer_id == m.layer_id) {
                return Err(Error::invalid(format!("duplicate layer id {}", m.layer_id)));
            }
        }
        Ok(FeatureStack { maps })
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// A (H, W, H, W) correlation map with entries in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Correlation4D {
    pub values: Tensor,
}

impl Correlation4D {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            &[h, w, h2, w2] if h == h2 && w == w2 => Ok(Correlation4D { values }),
            s => Err(Error::invalid(format!("correlation must be (H, W, H, W), got {s:?}"))),
        }
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }
}

/// Stacked (L, H, W, H, W) correlation maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelCorrelation {
    pub values: Tensor,
}

impl MultiChannelCorrelation {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            &[_, h, w, h2, w2] if h == h2 && w == w2 => Ok(MultiChannelCorrelation { values }),
            s => Err(Error::invalid(format!(
                "multi-channel correlation must be (L, H, W, H, W), got {s:?}"
            ))),
        }
    }

    pub fn channel_count(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn channel(&self, c: usize) -> Correlation4D {
        let (h, w) = self.grid_size();
        let n = h * w * h * w;
        let data = self.values.data()[c * n..(c + 1) * n].to_vec();
        Correlation4D {
            values: Tensor::new(&[h, w, h, w], data).expect("channel slice"),
        }
    }
}

/// C[x, x̂] = ReLU(cos(F[x], F̂[x̂])) between two equally sized feature maps.
pub fn cosine_correlation(f: &FeatureMap, f_hat: &FeatureMap) -> Result<Correlation4D> {
    let out = cosine_correlation_var(
        &Var::constant(f.values.clone()),
        &Var::constant(f_hat.values.clone()),
    )?;
    Correlation4D::new(out.value().clone())
}

/// Differentiable cosine correlation of two (H, W, D) maps.
pub fn cosine_correlation_var(f: &Var, f_hat: &Var) -> Result<Var> {
    let (&[h, w, d], &[h2, w2, d2]) = (f.shape(), f_hat.shape()) else {
        return Err(Error::shape("cosine_correlation", f.shape(), f_hat.shape()));
    };
    if d != d2 {
        return Err(Error::shape("cosine_correlation depth", f.shape(), f_hat.shape()));
    }
    if (h, w) != (h2, w2) {
        return Err(Error::shape("cosine_correlation grid", f.shape(), f_hat.shape()));
    }
    let a = f.reshape(&[h * w, d])?.normalize_rows(NORM_EPS)?;
    let b = f_hat.reshape(&[h * w, d])?.normalize_rows(NORM_EPS)?;
    a.matmul(&b.transpose()?)?.relu().reshape(&[h, w, h, w])
}

/// Resizes every correlation to `target_grid` and stacks them as channels.
pub fn assemble_multichannel(
    correlations: &[Correlation4D],
    target_grid: (usize, usize),
) -> Result<MultiChannelCorrelation> {
    let vars: Vec<Var> = correlations
        .iter()
        .map(|c| Var::constant(c.values.clone()))
        .collect();
    let out = assemble_multichannel_var(&vars, target_grid)?;
    MultiChannelCorrelation::new(out.value().clone())
}

pub fn assemble_multichannel_var(correlations: &[Var], target_grid: (usize, usize)) -> Result<Var> {
    if correlations.is_empty() {
        return Err(Error::Empty("correlation list"));
    }
    let (h, w) = target_grid;
    if h == 0 || w == 0 {
        return Err(Error::invalid("target grid must be positive"));
    }
    let channels = correlations
        .iter()
        .map(|c| {
            c.bilinear_resize(&[0, 1, 2, 3], &[h, w, h, w])?
                .reshape(&[1, h, w, h, w])
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&channels, 0)
}

/// Correlates matching layers of two stacks and assembles them at `target_grid`.
pub fn correlate_stacks(
    source: &FeatureStack,
    target: &FeatureStack,
    target_grid: (usize, usize),
) -> Result<MultiChannelCorrelation> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "source has {} layers, target has {}",
            source.len(),
            target.len()
        )));
    }
    let corrs = source
        .maps()
        .iter()
        .zip(target.maps())
        .map(|(a, b)| cosine_correlation(a, b))
        .collect::<Result<Vec<_>>>()?;
    assemble_multichannel(&corrs, target_grid)
}
