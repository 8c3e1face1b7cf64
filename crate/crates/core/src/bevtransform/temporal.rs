use std::ops::Range;

use super::grid::BevFeature;
use crate::error::{Error, Result};
use crate::numcore::{AttentionCache, MultiHeadAttention, ParamStore, Tensor};
use crate::rng::SplitMix64;

/// Updates the cells of a new grid that overlap the previous grid: each such
/// cell attends over the overlapping previous cells in a 3×3 window around
/// its match.
#[derive(Debug, Clone)]
pub struct TemporalUpdate {
    pub attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
pub struct TemporalCache {
    attn: Option<AttentionCache>,
    /// Updated next cells, in query order.
    targets: Vec<usize>,
    /// Previous cell behind each gathered key row.
    key_cells: Vec<usize>,
    prev_cells: usize,
}

impl TemporalUpdate {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        prev: &BevFeature,
        next: &BevFeature,
        overlap: &[(usize, usize)],
    ) -> Result<(BevFeature, TemporalCache)> {
        if prev.grid.cols() != next.grid.cols() || prev.config != next.config {
            return Err(Error::shape("temporal_update", "previous and next grids differ in layout"));
        }
        let mut out = next.clone();
        let prev_cells = prev.grid.rows();
        if overlap.is_empty() {
            return Ok((
                out,
                TemporalCache { attn: None, targets: vec![], key_cells: vec![], prev_cells },
            ));
        }
        let cfg = &prev.config;
        let mut in_overlap = vec![false; prev_cells];
        for &(i, _) in overlap {
            in_overlap[i] = true;
        }
        let targets: Vec<usize> = overlap.iter().map(|&(_, j)| j).collect();
        let mut key_cells = Vec::new();
        let mut segments: Vec<Range<usize>> = Vec::with_capacity(overlap.len());
        for &(i, _) in overlap {
            let (h, w) = cfg.cell_coords(i);
            let start = key_cells.len();
            for dh in -1i64..=1 {
                for dw in -1i64..=1 {
                    let (hh, ww) = (h as i64 + dh, w as i64 + dw);
                    if hh < 0 || ww < 0 || hh >= cfg.grid_h as i64 || ww >= cfg.grid_w as i64 {
                        continue;
                    }
                    let c = cfg.cell_index(hh as usize, ww as usize);
                    if in_overlap[c] {
                        key_cells.push(c);
                    }
                }
            }
            segments.push(start..key_cells.len());
        }
        let queries = next.grid.gather_rows(&targets);
        let keys = prev.grid.gather_rows(&key_cells);
        let (updated, attn) = self.attn.forward_segmented(store, &queries, &keys, &segments)?;
        for (r, &j) in targets.iter().enumerate() {
            out.grid.row_mut(j).copy_from_slice(updated.row(r));
        }
        Ok((
            out,
            TemporalCache { attn: Some(attn), targets, key_cells, prev_cells },
        ))
    }

    /// Returns `(dL/dprev, dL/dnext)`.
    pub fn backward(&self, store: &mut ParamStore, cache: &TemporalCache, dout: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut dnext = dout.clone();
        let mut dprev = Tensor::zeros(&[cache.prev_cells, dout.cols()]);
        let Some(attn) = &cache.attn else {
            return Ok((dprev, dnext));
        };
        let (dq, dkeys) = self.attn.backward(store, attn, &dout.gather_rows(&cache.targets))?;
        for (r, &j) in cache.targets.iter().enumerate() {
            dnext.row_mut(j).copy_from_slice(dq.row(r));
        }
        for (r, &i) in cache.key_cells.iter().enumerate() {
            for (a, b) in dprev.row_mut(i).iter_mut().zip(dkeys.row(r)) {
                *a += b;
            }
        }
        Ok((dprev, dnext))
    }
}
