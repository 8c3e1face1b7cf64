use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevConfig {
    /// Cells along world x.
    pub grid_h: usize,
    /// Cells along world y.
    pub grid_w: usize,
    /// Reference points per cell.
    pub num_heights: usize,
    /// Half-extent of the grid in x and y (m).
    pub range: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            grid_h: 11,
            grid_w: 11,
            num_heights: 4,
            range: 5.0,
            z_min: -1.0,
            z_max: 2.0,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h.is_multiple_of(2) || self.grid_w.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "BEV grid {}x{} must have odd sides",
                self.grid_h, self.grid_w
            )));
        }
        if self.num_heights == 0 || !(self.range > 0.0) || self.z_max < self.z_min {
            return Err(Error::InvalidArgument(format!("invalid BEV config {self:?}")));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_points(&self) -> usize {
        self.num_cells() * self.num_heights
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * self.range / self.grid_h as f64
    }

    /// Reference heights, inclusive of both ends.
    pub fn heights(&self) -> Vec<f64> {
        if self.num_heights == 1 {
            return vec![(self.z_min + self.z_max) / 2.0];
        }
        let step = (self.z_max - self.z_min) / (self.num_heights - 1) as f64;
        (0..self.num_heights).map(|k| self.z_min + k as f64 * step).collect()
    }

    /// Offset of cell `(h, w)` from the ego position.
    pub fn cell_offset(&self, h: usize, w: usize) -> [f64; 2] {
        let c = self.cell_size();
        [
            (h as f64 - (self.grid_h - 1) as f64 / 2.0) * c,
            (w as f64 - (self.grid_w - 1) as f64 / 2.0) * c,
        ]
    }

    pub fn cell_index(&self, h: usize, w: usize) -> usize {
        h * self.grid_w + w
    }

    pub fn cell_coords(&self, index: usize) -> (usize, usize) {
        (index / self.grid_w, index % self.grid_w)
    }

    pub fn center_cell(&self) -> usize {
        self.cell_index((self.grid_h - 1) / 2, (self.grid_w - 1) / 2)
    }
}

/// BEV grid anchored at an ego position. Row `h * W + w` of `grid` is cell
/// `(h, w)`; `h` runs along world x.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeature {
    pub grid: Tensor,
    pub ego: Vec3,
    pub config: BevConfig,
    pub step: usize,
}

impl BevFeature {
    pub fn cell_size(&self) -> f64 {
        self.config.cell_size()
    }

    pub fn cell_center(&self, index: usize) -> Vec3 {
        let (h, w) = self.config.cell_coords(index);
        let [dx, dy] = self.config.cell_offset(h, w);
        [self.ego[0] + dx, self.ego[1] + dy, self.ego[2]]
    }
}

/// `H·W·Z` world points; index `(h * W + w) * Z + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePoints {
    pub points: Vec<Vec3>,
    pub ego: Vec3,
}

pub fn make_reference_points(cfg: &BevConfig, ego: Vec3) -> Result<ReferencePoints> {
    cfg.validate()?;
    let heights = cfg.heights();
    let mut points = Vec::with_capacity(cfg.num_points());
    for h in 0..cfg.grid_h {
        for w in 0..cfg.grid_w {
            let [dx, dy] = cfg.cell_offset(h, w);
            for &z in &heights {
                points.push([ego[0] + dx, ego[1] + dy, ego[2] + z]);
            }
        }
    }
    Ok(ReferencePoints { points, ego })
}

/// Sinusoidal encoding of an ego-relative position: for each axis and
/// frequency `π·2^k / scale`, a (sin, cos) pair; zero-padded to `dim`.
pub fn positional_encoding(rel: Vec3, dim: usize, scale: f64) -> Vec<f64> {
    let freqs = dim / 6;
    let mut out = Vec::with_capacity(dim);
    for &x in &rel {
        for k in 0..freqs {
            let a = x * std::f64::consts::PI * (1u64 << k) as f64 / scale;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out.resize(dim, 0.0);
    out
}
