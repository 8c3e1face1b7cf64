use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_3d, OrientedBox3D};

pub const IOU_THRESHOLDS: [f64; 2] = [0.25, 0.50];

/// One scored box; `bbox.category` is the predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: usize,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: OrientedBox3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene: String,
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<OrientedBox3D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: usize,
    pub num_gt: usize,
    /// One entry per IoU threshold.
    pub ap: Vec<f64>,
    pub ar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApArReport {
    pub thresholds: Vec<f64>,
    pub per_category: Vec<CategoryMetrics>,
    /// Means over categories present in the ground truth.
    pub mean_ap: Vec<f64>,
    pub mean_ar: Vec<f64>,
}

impl ApArReport {
    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.thresholds.iter().position(|&x| (x - t).abs() < 1e-12)
    }

    pub fn map_at(&self, t: f64) -> Option<f64> {
        self.threshold_index(t).map(|i| self.mean_ap[i])
    }

    pub fn mar_at(&self, t: f64) -> Option<f64> {
        self.threshold_index(t).map(|i| self.mean_ar[i])
    }

    /// `category,AP25,AR25,AP50,AR50` rows plus a `mean` row.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut s = String::from("category");
        for t in &self.thresholds {
            let pct = (t * 100.0).round() as u32;
            let _ = write!(s, ",AP{pct},AR{pct}");
        }
        s.push('\n');
        for m in &self.per_category {
            let name = names.get(m.category).copied().unwrap_or("?");
            s.push_str(name);
            for (ap, ar) in m.ap.iter().zip(&m.ar) {
                let _ = write!(s, ",{ap:.6},{ar:.6}");
            }
            s.push('\n');
        }
        s.push_str("mean");
        for (ap, ar) in self.mean_ap.iter().zip(&self.mean_ar) {
            let _ = write!(s, ",{ap:.6},{ar:.6}");
        }
        s.push('\n');
        s
    }
}

/// Area under the all-point interpolated precision-recall curve.
pub fn average_precision(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Per-category AP/AR over scenes. Predictions are swept in descending
/// confidence; each one is a true positive when its best-overlapping ground
/// truth of the same category has `iou_3d ≥ t` and is still unmatched.
pub fn eval_ap_ar(scenes: &[SceneDetections], num_classes: usize, thresholds: &[f64]) -> Result<ApArReport> {
    for s in scenes {
        for d in &s.predictions {
            if !d.confidence.is_finite() {
                return Err(Error::NonFinite(format!("confidence in scene {}", s.scene)));
            }
            if d.category >= num_classes {
                return Err(Error::OutOfRange(format!("predicted category {} of {num_classes}", d.category)));
            }
        }
    }
    // best[s][p] = (gt index, iou) of the best same-category ground truth.
    let best: Vec<Vec<Option<(usize, f64)>>> = scenes
        .par_iter()
        .map(|s| {
            s.predictions
                .iter()
                .map(|d| {
                    s.ground_truth
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| g.category == d.category)
                        .map(|(i, g)| (i, iou_3d(&d.bbox, g)))
                        .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                            Some((_, bv)) if bv >= v => acc,
                            _ => Some((i, v)),
                        })
                })
                .collect()
        })
        .collect();

    let mut per_category = Vec::new();
    for c in 0..num_classes {
        let num_gt: usize = scenes.iter().map(|s| s.ground_truth.iter().filter(|g| g.category == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut order: Vec<(usize, usize)> = scenes
            .iter()
            .enumerate()
            .flat_map(|(si, s)| {
                s.predictions.iter().enumerate().filter(|(_, d)| d.category == c).map(move |(pi, _)| (si, pi))
            })
            .collect();
        order.sort_by(|a, b| {
            let ca = scenes[a.0].predictions[a.1].confidence;
            let cb = scenes[b.0].predictions[b.1].confidence;
            cb.total_cmp(&ca).then(a.cmp(b))
        });
        let mut ap = Vec::with_capacity(thresholds.len());
        let mut ar = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let mut matched: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
            let (mut tp, mut fp) = (0usize, 0usize);
            let mut recall = Vec::with_capacity(order.len());
            let mut precision = Vec::with_capacity(order.len());
            for &(si, pi) in &order {
                match best[si][pi] {
                    Some((g, v)) if v >= t && !matched[si][g] => {
                        matched[si][g] = true;
                        tp += 1;
                    }
                    _ => fp += 1,
                }
                recall.push(tp as f64 / num_gt as f64);
                precision.push(tp as f64 / (tp + fp) as f64);
            }
            ap.push(average_precision(&recall, &precision));
            ar.push(tp as f64 / num_gt as f64);
        }
        per_category.push(CategoryMetrics { category: c, num_gt, ap, ar });
    }
    let mean = |f: &dyn Fn(&CategoryMetrics) -> f64| {
        if per_category.is_empty() {
            0.0
        } else {
            per_category.iter().map(f).sum::<f64>() / per_category.len() as f64
        }
    };
    let mean_ap = (0..thresholds.len()).map(|i| mean(&|m| m.ap[i])).collect();
    let mean_ar = (0..thresholds.len()).map(|i| mean(&|m| m.ar[i])).collect();
    Ok(ApArReport { thresholds: thresholds.to_vec(), per_category, mean_ap, mean_ar })
}
