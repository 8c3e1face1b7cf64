use serde::{Deserialize, Serialize};

use crate::bevtransform::{positional_encoding, BevConfig, BevFeature};
use crate::error::{Error, Result};
use crate::geometry::{OrientedBox3D, Vec3};
use crate::numcore::{
    softmax, BlockDims, CrossAttentionLayer, CrossAttentionLayerCache, Ffn, FfnCache, FfnSublayer, FfnSublayerCache,
    Linear, ParamId, ParamStore, SelfAttentionBlock, SelfAttentionBlockCache, Tensor,
};
use crate::rng::SplitMix64;

/// `(cx, cy, cz, l, w, h, sin yaw, cos yaw)`.
pub const BOX_PARAMS: usize = 8;
const MIN_EXTENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub num_queries: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Ties each query to a fixed BEV anchor that biases its cross-attention
    /// toward nearby cells; the predicted center is then an offset from the
    /// centroid of the cells the last layer attends to.
    pub anchored: bool,
    /// Per-cell `LN(x + FFN(x))` applied to the keys before decoding.
    pub key_ffn: bool,
    /// Self-attention blocks over the BEV cells before decoding.
    pub neck_layers: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            num_queries: 32,
            num_layers: 2,
            num_classes: crate::synthworld::NUM_CATEGORIES,
            dim: 32,
            heads: 4,
            hidden: 64,
            anchored: true,
            key_ffn: false,
            neck_layers: 0,
        }
    }
}

impl DetectionConfig {
    pub fn dims(&self) -> BlockDims {
        BlockDims { dim: self.dim, heads: self.heads, hidden: self.hidden }
    }

    /// Side of the square lattice the anchors are taken from.
    fn lattice_side(&self) -> usize {
        (self.num_queries as f64).sqrt().ceil() as usize
    }

    /// Anchor spacing in units of the perception range.
    pub fn anchor_spacing(&self) -> f64 {
        2.0 / self.lattice_side() as f64
    }

    /// `N_q` points in `[-1, 1]²` (units of range): bin centers of a `k × k`
    /// lattice, keeping the ones closest to the ego.
    pub fn anchors(&self) -> Vec<[f64; 2]> {
        let k = self.lattice_side();
        let step = 2.0 / k as f64;
        let mut pts: Vec<[f64; 2]> = (0..k * k)
            .map(|i| [-1.0 + step * ((i / k) as f64 + 0.5), -1.0 + step * ((i % k) as f64 + 0.5)])
            .collect();
        pts.sort_by(|a, b| a[0].hypot(a[1]).total_cmp(&b[0].hypot(b[1])));
        pts.truncate(self.num_queries);
        pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        pts
    }
}

/// Raw head outputs: `logits [N_q × (C+1)]` (last column is no-object) and
/// unconstrained box parameters `[N_q × 8]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub logits: Tensor,
    pub boxes: Tensor,
}

impl HeadOutput {
    pub fn num_queries(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub bbox: OrientedBox3D,
}

impl Prediction {
    /// Highest-scoring real category and its probability.
    pub fn best(&self) -> (usize, f64) {
        let c = self.class_probs.len() - 1;
        let mut best = (0, self.class_probs[0]);
        for (k, &p) in self.class_probs[..c].iter().enumerate() {
            if p > best.1 {
                best = (k, p);
            }
        }
        best
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps raw outputs to normalized box parameters (softplus on extents).
pub fn box_params(raw: &[f64]) -> [f64; BOX_PARAMS] {
    let mut p = [0.0; BOX_PARAMS];
    p.copy_from_slice(&raw[..BOX_PARAMS]);
    for v in &mut p[3..6] {
        *v = softplus(*v);
    }
    p
}

/// `d params / d raw`, diagonal.
pub fn box_params_grad(raw: &[f64]) -> [f64; BOX_PARAMS] {
    let mut g = [1.0; BOX_PARAMS];
    for k in 3..6 {
        g[k] = sigmoid(raw[k]);
    }
    g
}

/// Normalized regression target of a box relative to `ego`.
pub fn encode_box(b: &OrientedBox3D, ego: Vec3, range: f64) -> [f64; BOX_PARAMS] {
    [
        (b.center[0] - ego[0]) / range,
        (b.center[1] - ego[1]) / range,
        (b.center[2] - ego[2]) / range,
        b.extent[0] / range,
        b.extent[1] / range,
        b.extent[2] / range,
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// World box from normalized parameters; the (sin, cos) pair is renormalized.
pub fn decode_params(p: &[f64; BOX_PARAMS], ego: Vec3, range: f64, category: usize) -> OrientedBox3D {
    let center = [ego[0] + p[0] * range, ego[1] + p[1] * range, ego[2] + p[2] * range];
    let extent = [
        (p[3] * range).max(MIN_EXTENT),
        (p[4] * range).max(MIN_EXTENT),
        (p[5] * range).max(MIN_EXTENT),
    ];
    let norm = p[6].hypot(p[7]);
    let yaw = if norm > 0.0 { (p[6] / norm).atan2(p[7] / norm) } else { 0.0 };
    OrientedBox3D::new(center, extent, yaw, category).expect("extents clamped positive")
}

/// Cell-center offsets in units of the range, by cell index.
fn cell_positions(bev: &BevConfig) -> Vec<[f64; 2]> {
    (0..bev.num_cells())
        .map(|i| {
            let (h, w) = bev.cell_coords(i);
            let [dx, dy] = bev.cell_offset(h, w);
            [dx / bev.range, dy / bev.range]
        })
        .collect()
}

/// Learned queries decoded against the BEV grid by cross-attention layers,
/// followed by a class head and a box head.
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub config: DetectionConfig,
    pub queries: ParamId,
    pub key_ffn: Option<FfnSublayer>,
    pub neck: Vec<SelfAttentionBlock>,
    pub layers: Vec<CrossAttentionLayer>,
    pub class_head: Linear,
    pub box_head: Ffn,
}

#[derive(Debug, Clone)]
pub struct DetectionHeadCache {
    key_ffn: Option<FfnSublayerCache>,
    neck: Vec<SelfAttentionBlockCache>,
    layers: Vec<CrossAttentionLayerCache>,
    decoded: Tensor,
    box_cache: FfnCache,
    bev_config: BevConfig,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, name: &str, config: DetectionConfig, rng: &mut SplitMix64) -> Result<Self> {
        if config.num_queries == 0 || config.num_layers == 0 || config.num_classes == 0 {
            return Err(Error::InvalidArgument(format!("degenerate detection config {config:?}")));
        }
        let queries = store.register_uniform(&format!("{name}.queries"), &[config.num_queries, config.dim], 1.0, rng)?;
        let key_ffn = if config.key_ffn {
            Some(FfnSublayer::new(store, &format!("{name}.keys"), config.dims(), rng)?)
        } else {
            None
        };
        let neck = (0..config.neck_layers)
            .map(|l| SelfAttentionBlock::new(store, &format!("{name}.neck{l}"), config.dims(), rng))
            .collect::<Result<Vec<_>>>()?;
        let layers = (0..config.num_layers)
            .map(|l| CrossAttentionLayer::new(store, &format!("{name}.layer{l}"), config.dims(), rng))
            .collect::<Result<Vec<_>>>()?;
        let class_head = Linear::new(store, &format!("{name}.class"), config.dim, config.num_classes + 1, rng)?;
        let box_head = Ffn::new(store, &format!("{name}.box"), config.dim, config.hidden, BOX_PARAMS, rng)?;
        Ok(Self { config, queries, key_ffn, neck, layers, class_head, box_head })
    }

    /// Gaussian log-prior `-|anchor - cell|² / 2σ²` with σ the anchor spacing.
    pub fn attention_bias(&self, bev: &BevConfig) -> Tensor {
        let anchors = self.config.anchors();
        let sigma = self.config.anchor_spacing() * bev.range;
        let mut out = Tensor::zeros(&[anchors.len(), bev.num_cells()]);
        for (q, a) in anchors.iter().enumerate() {
            let row = out.row_mut(q);
            for h in 0..bev.grid_h {
                for w in 0..bev.grid_w {
                    let [dx, dy] = bev.cell_offset(h, w);
                    let d2 = (a[0] * bev.range - dx).powi(2) + (a[1] * bev.range - dy).powi(2);
                    row[bev.cell_index(h, w)] = -d2 / (2.0 * sigma * sigma);
                }
            }
        }
        out
    }

    /// Initial decoder input: the learned queries, plus the encoding of each
    /// query's anchor when anchored.
    fn initial_queries(&self, store: &ParamStore, bev: &BevConfig) -> Tensor {
        let mut x = store.value(self.queries).clone();
        if self.config.anchored {
            let scale = bev.range * 1.1;
            for (q, a) in self.config.anchors().iter().enumerate() {
                let pe = positional_encoding([a[0] * bev.range, a[1] * bev.range, 0.0], self.config.dim, scale);
                for (v, p) in x.row_mut(q).iter_mut().zip(pe) {
                    *v += p;
                }
            }
        }
        x
    }

    /// Fixed sinusoidal encoding of each cell's ego-relative offset.
    pub fn key_encoding(&self, bev: &BevConfig) -> Tensor {
        let mut out = Tensor::zeros(&[bev.num_cells(), self.config.dim]);
        let scale = bev.range * 1.1;
        for h in 0..bev.grid_h {
            for w in 0..bev.grid_w {
                let [dx, dy] = bev.cell_offset(h, w);
                let pe = positional_encoding([dx, dy, 0.0], self.config.dim, scale);
                out.row_mut(bev.cell_index(h, w)).copy_from_slice(&pe);
            }
        }
        out
    }

    pub fn forward(&self, store: &ParamStore, bev: &BevFeature) -> Result<(HeadOutput, DetectionHeadCache)> {
        if bev.grid.shape() != [bev.config.num_cells(), self.config.dim] {
            return Err(Error::shape(
                "DetectionHead::forward",
                format!("grid {:?} vs {} cells × {}", bev.grid.shape(), bev.config.num_cells(), self.config.dim),
            ));
        }
        let mut keys = bev.grid.clone();
        keys.add_assign(&self.key_encoding(&bev.config))?;
        let key_ffn_cache = match &self.key_ffn {
            Some(f) => {
                let (y, c) = f.forward(store, &keys)?;
                keys = y;
                Some(c)
            }
            None => None,
        };
        let mut neck_caches = Vec::with_capacity(self.neck.len());
        for block in &self.neck {
            let (y, c) = block.forward(store, &keys)?;
            neck_caches.push(c);
            keys = y;
        }
        let mut x = self.initial_queries(store, &bev.config);
        let bias = self.config.anchored.then(|| self.attention_bias(&bev.config));
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = match &bias {
                Some(b) => layer.forward_biased(store, &x, &keys, b)?,
                None => layer.forward(store, &x, &keys)?,
            };
            caches.push(c);
            x = y;
        }
        let logits = self.class_head.forward(store, &x)?;
        let (mut boxes, box_cache) = self.box_head.forward(store, &x)?;
        if self.config.anchored {
            let last = &caches.last().expect("at least one layer").attn.attn;
            let cells = cell_positions(&bev.config);
            let heads = self.config.heads as f64;
            for h in 0..self.config.heads {
                let w = last.weights(h);
                for q in 0..self.config.num_queries {
                    let row = &w[q * cells.len()..(q + 1) * cells.len()];
                    let b = boxes.row_mut(q);
                    for (p, c) in row.iter().zip(&cells) {
                        b[0] += p * c[0] / heads;
                        b[1] += p * c[1] / heads;
                    }
                }
            }
        }
        Ok((HeadOutput { logits, boxes }, DetectionHeadCache { key_ffn: key_ffn_cache, neck: neck_caches, layers: caches, decoded: x, box_cache, bev_config: bev.config }))
    }

    /// Accumulates parameter gradients and returns `dL/d grid`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &DetectionHeadCache,
        dlogits: &Tensor,
        dboxes: &Tensor,
    ) -> Result<Tensor> {
        let mut dx = self.class_head.backward(store, &cache.decoded, dlogits)?;
        dx.add_assign(&self.box_head.backward(store, &cache.box_cache, dboxes)?)?;
        let mut dkeys: Option<Tensor> = None;
        let centroid_grad = self.config.anchored.then(|| {
            let cells = cell_positions(&cache.bev_config);
            let heads = self.config.heads as f64;
            let per_query: Vec<f64> = (0..self.config.num_queries)
                .flat_map(|q| {
                    let (gx, gy) = (dboxes.row(q)[0], dboxes.row(q)[1]);
                    cells.iter().map(move |c| (gx * c[0] + gy * c[1]) / heads)
                })
                .collect();
            vec![per_query; self.config.heads]
        });
        let last = self.layers.len() - 1;
        for (l, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let dw = if l == last { centroid_grad.as_deref() } else { None };
            let (dprev, dctx) = layer.backward_with_weight_grad(store, c, &dx, dw)?;
            match dkeys.as_mut() {
                Some(k) => k.add_assign(&dctx)?,
                None => dkeys = Some(dctx),
            }
            dx = dprev;
        }
        store.accumulate(self.queries, dx.data());
        let mut dkeys = dkeys.expect("at least one layer");
        for (block, c) in self.neck.iter().zip(&cache.neck).rev() {
            dkeys = block.backward(store, c, &dkeys)?;
        }
        if let (Some(f), Some(c)) = (&self.key_ffn, &cache.key_ffn) {
            dkeys = f.backward(store, c, &dkeys)?;
        }
        Ok(dkeys)
    }

    /// Decoded predictions, one per query.
    pub fn predict(&self, out: &HeadOutput, ego: Vec3, range: f64) -> Result<Vec<Prediction>> {
        decode_predictions(out, ego, range)
    }
}

/// Softmax class probabilities and world boxes; the box category is the
/// best real class.
pub fn decode_predictions(out: &HeadOutput, ego: Vec3, range: f64) -> Result<Vec<Prediction>> {
    (0..out.num_queries())
        .map(|q| {
            let class_probs = softmax(out.logits.row(q))?;
            let params = box_params(out.boxes.row(q));
            let mut pred = Prediction { class_probs, bbox: decode_params(&params, ego, range, 0) };
            pred.bbox.category = pred.best().0;
            Ok(pred)
        })
        .collect()
}

/// Runs the head on a BEV feature and decodes every query.
pub fn detect_forward(store: &ParamStore, head: &DetectionHead, bev: &BevFeature) -> Result<Vec<Prediction>> {
    let (out, _) = head.forward(store, bev)?;
    decode_predictions(&out, bev.ego, bev.config.range)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bev(seed: u64) -> BevFeature {
        let config = BevConfig::default();
        let mut rng = SplitMix64::new(seed);
        let grid = Tensor::from_vec(
            &[config.num_cells(), 32],
            (0..config.num_cells() * 32).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        BevFeature { grid, ego: [1.0, -2.0, 0.0], config, step: 0 }
    }

    #[test]
    fn one_prediction_per_query_with_positive_extents() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(4);
        let head = DetectionHead::new(&mut store, "det", DetectionConfig::default(), &mut rng).unwrap();
        let preds = detect_forward(&store, &head, &bev(1)).unwrap();
        assert_eq!(preds.len(), 32);
        for p in &preds {
            assert!(p.bbox.extent.iter().all(|&e| e > 0.0));
            assert!((p.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let again = detect_forward(&store, &head, &bev(1)).unwrap();
        assert_eq!(preds, again);
    }

    #[test]
    fn anchors_cover_the_square() {
        let a = DetectionConfig::default().anchors();
        assert_eq!(a.len(), 32);
        // 6×6 lattice without its four corners.
        assert!(a.iter().all(|p| p[0].abs() < 0.9 || p[1].abs() < 0.9));
        let mut sorted = a.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 32);
    }

    #[test]
    fn extreme_raw_outputs_still_decode() {
        for raw in [-1e4, -800.0, 0.0, 800.0] {
            let p = box_params(&[raw; 8]);
            let b = decode_params(&p, [0.0; 3], 5.0, 0);
            assert!(b.extent.iter().all(|&e| e > 0.0 && e.is_finite()));
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let b = OrientedBox3D::new([2.0, -1.0, 0.4], [1.2, 0.6, 0.8], 0.3, 2).unwrap();
        let ego = [1.0, 1.0, 0.0];
        let d = decode_params(&encode_box(&b, ego, 5.0), ego, 5.0, 2);
        for k in 0..3 {
            assert!((d.center[k] - b.center[k]).abs() < 1e-12);
            assert!((d.extent[k] - b.extent[k]).abs() < 1e-12);
        }
        assert!((d.yaw - b.yaw).abs() < 1e-12);
    }

    #[test]
    fn yaw_uses_renormalized_pair() {
        let p = [0.0, 0.0, 0.0, 0.1, 0.1, 0.1, 3.0, 3.0];
        let b = decode_params(&p, [0.0; 3], 5.0, 0);
        assert!((b.yaw - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    }

    #[test]
    fn gradient_through_decode_and_loss() {
        use crate::detection::loss::{detection_loss, BoxTarget, LossConfig};
        use crate::numcore::{finite_diff_check, BlockProbe};
        let bev_cfg = BevConfig { grid_h: 3, grid_w: 3, num_heights: 2, range: 5.0, z_min: 0.0, z_max: 1.0 };
        for seed in 0..4 {
            let config =
                DetectionConfig {
                num_queries: 6,
                num_layers: 2,
                num_classes: 3,
                dim: 8,
                heads: 2,
                hidden: 12,
                anchored: seed % 2 == 0,
                key_ffn: seed % 2 == 1,
                neck_layers: (seed / 2) as usize,
            };
            let mut store = ParamStore::new();
            let mut rng = SplitMix64::new(seed);
            let head = DetectionHead::new(&mut store, "det", config, &mut rng).unwrap();
            let grid = Tensor::from_vec(&[9, 8], (0..72).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
            let targets: Vec<BoxTarget> = (0..3)
                .map(|g| BoxTarget { category: g % 3, params: std::array::from_fn(|_| rng.uniform(-0.5, 0.5)) })
                .collect();
            let params: Vec<_> = store.ids().collect();
            let (h1, h2) = (head.clone(), head.clone());
            let (t1, t2) = (targets.clone(), targets);
            let feature = move |g: &Tensor| BevFeature { grid: g.clone(), ego: [0.0; 3], config: bev_cfg, step: 0 };
            let f2 = feature;
            let mut probe = BlockProbe::new(
                store,
                vec![grid],
                params,
                seed,
                Box::new(move |s, xs| {
                    let (out, _) = h1.forward(s, &feature(&xs[0]))?;
                    let (l, _) = detection_loss(&out, &t1, &LossConfig::default())?;
                    Ok(Tensor::vector(vec![l.total]))
                }),
                Box::new(move |s, xs, dy| {
                    let (out, cache) = h2.forward(s, &f2(&xs[0]))?;
                    let (_, mut g) = detection_loss(&out, &t2, &LossConfig::default())?;
                    g.logits.scale(dy.data()[0]);
                    g.boxes.scale(dy.data()[0]);
                    Ok(vec![h2.backward(s, &cache, &g.logits, &g.boxes)?])
                }),
            );
            let r = finite_diff_check(&mut probe, 1e-4).unwrap();
            assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
        }
    }
}
