use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::{GridNeighborhood, SceneGraph};

/// Bivariate Gaussian over `(Δx, Δy)` cell offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPoolConfig {
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
}

impl Default for GaussianPoolConfig {
    fn default() -> Self {
        Self { mean: [0.0, 0.0], covariance: [[2.0, 0.0], [0.0, 2.0]] }
    }
}

impl GaussianPoolConfig {
    /// Inverse covariance; rejects non-symmetric or non-positive-definite input.
    pub fn precision(&self) -> Result<[[f64; 2]; 2]> {
        let [[a, b], [c, d]] = self.covariance;
        if ![a, b, c, d, self.mean[0], self.mean[1]].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gaussian pool config".into()));
        }
        if (b - c).abs() > 1e-12 * (1.0 + b.abs()) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let det = a * d - b * c;
        if a <= 0.0 || det <= f64::EPSILON * (a * d).abs() {
            return Err(Error::Degenerate(format!("covariance {:?} is not positive definite", self.covariance)));
        }
        Ok([[d / det, -b / det], [-c / det, a / det]])
    }
}

/// Gaussian weights of the neighborhood cells, normalized over the
/// neighborhood.
pub fn gaussian_weights(offsets: &[[f64; 2]], cfg: &GaussianPoolConfig) -> Result<Vec<f64>> {
    let p = cfg.precision()?;
    if offsets.is_empty() {
        return Err(Error::InvalidArgument("empty neighborhood".into()));
    }
    let mut w = Vec::with_capacity(offsets.len());
    for o in offsets {
        if !o.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("cell offset".into()));
        }
        let x = [o[0] - cfg.mean[0], o[1] - cfg.mean[1]];
        let q = x[0] * (p[0][0] * x[0] + p[0][1] * x[1]) + x[1] * (p[1][0] * x[0] + p[1][1] * x[1]);
        w.push((-0.5 * q).exp());
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all gaussian weights underflow".into()));
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Per-candidate pooling weights, computed once per step.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePooling {
    pub neighborhoods: Vec<GridNeighborhood>,
    pub weights: Vec<Vec<f64>>,
}

impl CandidatePooling {
    /// `neighborhoods` lists the candidates then the stop entry.
    pub fn new(neighborhoods: Vec<GridNeighborhood>, cfg: &GaussianPoolConfig) -> Result<Self> {
        let weights = neighborhoods.iter().map(|nb| gaussian_weights(&nb.offsets, cfg)).collect::<Result<_>>()?;
        Ok(Self { neighborhoods, weights })
    }

    /// `s^c_k = Σ_i W_{k,i} s^l_i`.
    pub fn pool(&self, grid_scores: &[f64]) -> Result<Vec<f64>> {
        self.neighborhoods
            .iter()
            .zip(&self.weights)
            .map(|(nb, w)| {
                nb.cells
                    .iter()
                    .zip(w)
                    .map(|(&i, wi)| {
                        grid_scores
                            .get(i)
                            .map(|s| wi * s)
                            .ok_or_else(|| Error::OutOfRange(format!("cell {i} of {}", grid_scores.len())))
                    })
                    .sum()
            })
            .collect()
    }

    pub fn backward(&self, dpooled: &[f64], num_cells: usize) -> Vec<f64> {
        let mut d = vec![0.0; num_cells];
        for ((nb, w), g) in self.neighborhoods.iter().zip(&self.weights).zip(dpooled) {
            for (&i, wi) in nb.cells.iter().zip(w) {
                d[i] += wi * g;
            }
        }
        d
    }
}

/// Free-function form of [`CandidatePooling::pool`].
pub fn pool_grid_to_candidates(
    grid_scores: &[f64],
    neighborhoods: &[GridNeighborhood],
    cfg: &GaussianPoolConfig,
) -> Result<Vec<f64>> {
    CandidatePooling::new(neighborhoods.to_vec(), cfg)?.pool(grid_scores)
}

/// Where the backtracking score of non-candidate nodes came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BackSource {
    /// Sum over these candidate slots (already-visited candidates).
    Visited(Vec<usize>),
    /// `min(s^c) - 1` at this candidate slot.
    Fallback(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lifted {
    /// One score per known node in id order, then stop.
    pub scores: Vec<f64>,
    pub back_score: f64,
    pub source: BackSource,
    /// Candidate slot behind each global index, `None` for back-scored nodes.
    pub slot_of: Vec<Option<usize>>,
}

/// Lifts candidate scores `[K + 1]` (stop last) to the global node space
/// `[N + 1]`. Nodes that are not current candidates share one backtracking
/// score: the sum over already-visited candidates, or `min(s^c) - 1` when no
/// candidate has been visited.
pub fn lift_backtrack(graph: &SceneGraph, candidate_scores: &[f64], candidates: &[usize]) -> Result<Lifted> {
    if candidate_scores.len() != candidates.len() + 1 {
        return Err(Error::shape(
            "lift_backtrack",
            format!("{} scores for {} candidates plus stop", candidate_scores.len(), candidates.len()),
        ));
    }
    let ids = graph.node_ids();
    let mut slot_of: Vec<Option<usize>> = vec![None; ids.len() + 1];
    for (k, c) in candidates.iter().enumerate() {
        let g = ids.binary_search(c).map_err(|_| Error::OutOfRange(format!("candidate {c} not in graph")))?;
        if slot_of[g].is_some() {
            return Err(Error::InvalidArgument(format!("candidate {c} listed twice")));
        }
        slot_of[g] = Some(k);
    }
    slot_of[ids.len()] = Some(candidates.len());
    let visited: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| graph.node(**c).is_some_and(|n| n.visited))
        .map(|(k, _)| k)
        .collect();
    let (back_score, source) = if visited.is_empty() {
        let (k, m) = candidate_scores
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bk, bm), (k, &v)| if v < bm { (k, v) } else { (bk, bm) });
        (m - 1.0, BackSource::Fallback(k))
    } else {
        (visited.iter().map(|&k| candidate_scores[k]).sum(), BackSource::Visited(visited))
    };
    let scores = slot_of.iter().map(|s| s.map_or(back_score, |k| candidate_scores[k])).collect();
    Ok(Lifted { scores, back_score, source, slot_of })
}

impl Lifted {
    /// Gradient with respect to the candidate scores.
    pub fn backward(&self, dlifted: &[f64], num_slots: usize) -> Vec<f64> {
        let mut d = vec![0.0; num_slots];
        let mut dback = 0.0;
        for (slot, g) in self.slot_of.iter().zip(dlifted) {
            match slot {
                Some(k) => d[*k] += g,
                None => dback += g,
            }
        }
        match &self.source {
            BackSource::Visited(ks) => ks.iter().for_each(|&k| d[k] += dback),
            BackSource::Fallback(k) => d[*k] += dback,
        }
        d
    }
}

/// `s = W_f ŝ^c + (1 - W_f) s^g`; the endpoints return one branch unchanged.
pub fn fuse_scores(lifted: &[f64], graph: &[f64], fusion_weight: f64) -> Result<Vec<f64>> {
    if lifted.len() != graph.len() {
        return Err(Error::shape("fuse_scores", format!("{} vs {}", lifted.len(), graph.len())));
    }
    if !(0.0..=1.0).contains(&fusion_weight) {
        return Err(Error::InvalidArgument(format!("fusion weight {fusion_weight} outside [0, 1]")));
    }
    if fusion_weight == 1.0 {
        return Ok(lifted.to_vec());
    }
    if fusion_weight == 0.0 {
        return Ok(graph.to_vec());
    }
    Ok(lifted.iter().zip(graph).map(|(a, b)| fusion_weight * a + (1.0 - fusion_weight) * b).collect())
}
