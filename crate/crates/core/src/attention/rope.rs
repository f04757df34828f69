//! Rotary positional embedding over 4D match coordinates.
//!
//! Each match t = ((i·W + j)·H + k)·W + l carries the coordinates
//! (i, j, k, l). The head dimension is split into rotation planes (pairs of
//! adjacent dimensions 2p, 2p+1); every plane is assigned to one positional
//! axis, and plane p′ within an axis that owns d_a dimensions rotates by
//! θ_p′ · position with θ_p′ = base^(−2p′/d_a). Because every plane is a
//! pure rotation driven by a linear function of the coordinates, rotated
//! inner products only depend on coordinate differences.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    None,
    AbsoluteLearned,
    Rotary,
}

/// A positional quantity a group of rotation planes follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionAxis {
    I,
    J,
    K,
    L,
    /// Flattened source index i·W + j.
    Source,
    /// Flattened target index k·W + l.
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisAssignment {
    pub axis: PositionAxis,
    pub dims: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisPartition {
    /// Half the head dimensions follow the flattened source index, half the
    /// flattened target index. Needs D_h divisible by 4.
    Flattened,
    /// A quarter of the dimensions per coordinate i, j, k, l. Needs D_h
    /// divisible by 8.
    PerAxis,
    /// Explicit assignment, in plane order.
    Custom(Vec<AxisAssignment>),
}

impl AxisPartition {
    pub fn resolve(&self, d_head: usize) -> Result<Vec<AxisAssignment>> {
        let groups = match self {
            AxisPartition::Flattened => {
                if d_head % 4 != 0 {
                    return Err(Error::invalid(format!(
                        "flattened rotary partition needs D_h divisible by 4, got {d_head}"
                    )));
                }
                vec![
                    AxisAssignment { axis: PositionAxis::Source, dims: d_head / 2 },
                    AxisAssignment { axis: PositionAxis::Target, dims: d_head / 2 },
                ]
            }
            AxisPartition::PerAxis => {
                if d_head % 8 != 0 {
                    return Err(Error::invalid(format!(
                        "per-axis rotary partition needs D_h divisible by 8, got {d_head}"
                    )));
                }
                [PositionAxis::I, PositionAxis::J, PositionAxis::K, PositionAxis::L]
                    .into_iter()
                    .map(|axis| AxisAssignment { axis, dims: d_head / 4 })
                    .collect()
            }
            AxisPartition::Custom(groups) => groups.clone(),
        };
        let total: usize = groups.iter().map(|g| g.dims).sum();
        if total != d_head || groups.iter().any(|g| g.dims == 0 || g.dims % 2 != 0) {
            return Err(Error::invalid(format!(
                "rotary partition {groups:?} does not split D_h = {d_head} into even groups"
            )));
        }
        Ok(groups)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub mode: RopeMode,
    pub base_frequency: f64,
    pub partition: AxisPartition,
}

impl Default for RopeConfig {
    fn default() -> Self {
        RopeConfig {
            mode: RopeMode::Rotary,
            base_frequency: 10_000.0,
            partition: AxisPartition::Flattened,
        }
    }
}

impl RopeConfig {
    pub fn none() -> Self {
        RopeConfig {
            mode: RopeMode::None,
            ..RopeConfig::default()
        }
    }

    pub fn validate(&self, d_head: usize) -> Result<()> {
        if !(self.base_frequency > 0.0 && self.base_frequency.is_finite()) {
            return Err(Error::invalid("rotary base frequency must be positive"));
        }
        if self.mode == RopeMode::Rotary {
            if d_head % 2 != 0 {
                return Err(Error::invalid(format!(
                    "rotary embedding needs an even head dimension, got {d_head}"
                )));
            }
            self.partition.resolve(d_head)?;
        }
        Ok(())
    }
}

/// 4D integer coordinates of every match, plus the grid they index.
#[derive(Clone, Debug, PartialEq)]
pub struct Positions {
    pub grid: (usize, usize),
    pub coords: Vec<[i64; 4]>,
}

impl Positions {
    /// Coordinates of all H·W·H·W matches in flattening order.
    pub fn for_grid(h: usize, w: usize) -> Self {
        let mut coords = Vec::with_capacity(h * w * h * w);
        for i in 0..h {
            for j in 0..w {
                for k in 0..h {
                    for l in 0..w {
                        coords.push([i as i64, j as i64, k as i64, l as i64]);
                    }
                }
            }
        }
        Positions { grid: (h, w), coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Every coordinate moved by the same offset.
    pub fn shifted(&self, offset: [i64; 4]) -> Self {
        Positions {
            grid: self.grid,
            coords: self
                .coords
                .iter()
                .map(|c| [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2], c[3] + offset[3]])
                .collect(),
        }
    }

    fn axis_value(&self, t: usize, axis: PositionAxis) -> f64 {
        let [i, j, k, l] = self.coords[t];
        let w = self.grid.1 as i64;
        let v = match axis {
            PositionAxis::I => i,
            PositionAxis::J => j,
            PositionAxis::K => k,
            PositionAxis::L => l,
            PositionAxis::Source => i * w + j,
            PositionAxis::Target => k * w + l,
        };
        v as f64
    }
}

/// Precomputed cos/sin of every (match, plane) angle.
#[derive(Clone, Debug)]
pub struct RopeTable {
    pub d_head: usize,
    pub cos: Rc<[f64]>,
    pub sin: Rc<[f64]>,
}

impl RopeTable {
    pub fn new(positions: &Positions, cfg: &RopeConfig, d_head: usize) -> Result<Self> {
        if d_head % 2 != 0 {
            return Err(Error::invalid(format!(
                "rotary embedding needs an even head dimension, got {d_head}"
            )));
        }
        let groups = cfg.partition.resolve(d_head)?;
        // (axis, frequency) per plane
        let mut planes = Vec::with_capacity(d_head / 2);
        for g in &groups {
            for p in 0..g.dims / 2 {
                let theta = cfg.base_frequency.powf(-2.0 * p as f64 / g.dims as f64);
                planes.push((g.axis, theta));
            }
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for t in 0..positions.len() {
            for &(axis, theta) in &planes {
                let angle = theta * positions.axis_value(t, axis);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(RopeTable {
            d_head,
            cos: cos.into(),
            sin: sin.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.cos.len() / (self.d_head / 2)
    }

    pub fn apply(&self, x: &Var) -> Result<Var> {
        if x.shape() != [self.rows(), self.d_head] {
            return Err(Error::shape(
                "rope",
                x.shape(),
                &[self.rows(), self.d_head],
            ));
        }
        x.rotate_pairs(self.cos.clone(), self.sin.clone())
    }
}

/// Rotates every row of a (T, D_h) matrix by its match position.
pub fn rope_rotate(m: &Tensor, positions: &Positions, cfg: &RopeConfig) -> Result<Tensor> {
    if cfg.mode != RopeMode::Rotary {
        return Err(Error::invalid("rope_rotate requires rotary mode"));
    }
    let &[t, d] = m.shape() else {
        return Err(Error::invalid(format!("rope input must be (T, D_h), got {:?}", m.shape())));
    };
    if t != positions.len() {
        return Err(Error::shape("rope positions", m.shape(), &[positions.len(), 4]));
    }
    let table = RopeTable::new(positions, cfg, d)?;
    Ok(table.apply(&Var::constant(m.clone()))?.value().clone())
}
