use serde::{Deserialize, Serialize};

use super::head::{box_params, box_params_grad, encode_box, HeadOutput, BOX_PARAMS};
use super::matching::{hungarian_match, MatchResult};
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox3D, Vec3};
use crate::numcore::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda_cls: f64,
    pub lambda_box: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { focal_alpha: 0.25, focal_gamma: 2.0, lambda_cls: 1.0, lambda_box: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxTarget {
    pub category: usize,
    pub params: [f64; BOX_PARAMS],
}

impl BoxTarget {
    pub fn from_box(b: &OrientedBox3D, ego: Vec3, range: f64) -> Self {
        Self { category: b.category, params: encode_box(b, ego, range) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Focal term summed over queries, before weighting and normalization.
    pub focal: f64,
    /// L1 over matched box parameters, before weighting and normalization.
    pub l1: f64,
    pub num_targets: usize,
    pub matching: MatchResult,
}

/// Gradients of the loss with respect to [`HeadOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputGrad {
    pub logits: Tensor,
    pub boxes: Tensor,
}

/// `-α (1 - p)^γ ln p` and its derivative with respect to the true-class
/// logit direction: returns `(loss, g)` with `dL/dz_k = g (δ_tk - p_k)`.
pub fn focal_term(p: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = p.max(f64::MIN_POSITIVE);
    let q = 1.0 - p;
    let lnp = p.ln();
    let loss = -alpha * q.powf(gamma) * lnp;
    let mod_grad = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * p * lnp };
    let g = -alpha * (q.powf(gamma) - mod_grad);
    (loss, g)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Pairwise matching cost `[G × N_q]`: `λ_cls·(-p̂_class) + λ_box·L1`.
pub fn matching_cost(out: &HeadOutput, targets: &[BoxTarget], cfg: &LossConfig) -> Result<Tensor> {
    let n = out.num_queries();
    let mut cost = Tensor::zeros(&[targets.len(), n]);
    let probs = (0..n).map(|q| softmax(out.logits.row(q))).collect::<Result<Vec<_>>>()?;
    let params: Vec<_> = (0..n).map(|q| box_params(out.boxes.row(q))).collect();
    for (g, t) in targets.iter().enumerate() {
        let row = cost.row_mut(g);
        for q in 0..n {
            row[q] = cfg.lambda_cls * -probs[q][t.category] + cfg.lambda_box * l1(&params[q], &t.params);
        }
    }
    Ok(cost)
}

/// Set-prediction loss: Hungarian matching, focal loss over all queries
/// (unmatched ones target no-object) and L1 over matched boxes, divided by
/// `max(1, G)`.
pub fn detection_loss(
    out: &HeadOutput,
    targets: &[BoxTarget],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, HeadOutputGrad)> {
    let n = out.num_queries();
    let c = out.num_classes();
    if out.boxes.shape() != [n, BOX_PARAMS] {
        return Err(Error::shape("detection_loss", format!("boxes {:?}", out.boxes.shape())));
    }
    if let Some(t) = targets.iter().find(|t| t.category >= c) {
        return Err(Error::OutOfRange(format!("target category {} of {c}", t.category)));
    }
    let matching = hungarian_match(&matching_cost(out, targets, cfg)?)?;
    let mut class_of = vec![c; n];
    for (g, &q) in matching.assignment.iter().enumerate() {
        class_of[q] = targets[g].category;
    }
    let norm = targets.len().max(1) as f64;
    let mut dlogits = Tensor::zeros(&[n, c + 1]);
    let mut dboxes = Tensor::zeros(&[n, BOX_PARAMS]);
    let mut focal = 0.0;
    for q in 0..n {
        let p = softmax(out.logits.row(q))?;
        let t = class_of[q];
        let (loss, g) = focal_term(p[t], cfg.focal_alpha, cfg.focal_gamma);
        focal += loss;
        let scale = cfg.lambda_cls * g / norm;
        for (k, d) in dlogits.row_mut(q).iter_mut().enumerate() {
            let delta = if k == t { 1.0 } else { 0.0 };
            *d = scale * (delta - p[k]);
        }
    }
    let mut l1_sum = 0.0;
    for (g, &q) in matching.assignment.iter().enumerate() {
        let raw = out.boxes.row(q);
        let pred = box_params(raw);
        let dp = box_params_grad(raw);
        let target = &targets[g].params;
        l1_sum += l1(&pred, target);
        for (k, d) in dboxes.row_mut(q).iter_mut().enumerate() {
            let diff = pred[k] - target[k];
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d = cfg.lambda_box * sign * dp[k] / norm;
        }
    }
    let total = (cfg.lambda_cls * focal + cfg.lambda_box * l1_sum) / norm;
    Ok((
        LossBreakdown { total, focal, l1: l1_sum, num_targets: targets.len(), matching },
        HeadOutputGrad { logits: dlogits, boxes: dboxes },
    ))
}
