use std::ops::Range;

use super::grid::{make_reference_points, positional_encoding, BevConfig, BevFeature, ReferencePoints};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, frustum_visible, project_point, CameraIntrinsics, Pose, Projection, Vec3};
use crate::numcore::{AttentionCache, BlockDims, FfnSublayer, FfnSublayerCache, MultiHeadAttention, ParamStore, Tensor};
use crate::rng::SplitMix64;

pub type Camera = (Pose, CameraIntrinsics);

/// One bilinear tap of a gathered key: `(view, pixel, weight)`.
type Tap = (usize, usize, f64);

/// Lifts multi-view feature maps onto reference points: each point's
/// positional encoding attends over the features sampled where the point
/// projects, in the views that see it.
#[derive(Debug, Clone)]
pub struct ViewTransform {
    pub attn: MultiHeadAttention,
    /// Per-voxel `LN(x + FFN(x))` layers applied to visible points.
    pub refine: Vec<FfnSublayer>,
    pub dim: usize,
    pub encoding_scale: f64,
}

#[derive(Debug, Clone)]
pub struct ViewTransformCache {
    attn: AttentionCache,
    refine: Option<(Vec<FfnSublayerCache>, Vec<usize>)>,
    key_taps: Vec<Vec<Tap>>,
    view_shape: Vec<usize>,
    num_views: usize,
}

impl ViewTransformCache {
    /// Number of views that saw each reference point.
    pub fn key_counts(&self) -> Vec<usize> {
        self.attn.segments().iter().map(|s| s.len()).collect()
    }
}

impl ViewTransform {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: BlockDims,
        refine_layers: usize,
        encoding_scale: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(store, &format!("{name}.attn"), dims.dim, dims.heads, rng)?;
        let refine = (0..refine_layers)
            .map(|l| {
                let suffix = if l == 0 { String::new() } else { l.to_string() };
                FfnSublayer::new(store, &format!("{name}.refine{suffix}"), dims, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            attn,
            refine,
            dim: dims.dim,
            encoding_scale,
        })
    }

    fn check_views(&self, views: &[Tensor], cameras: &[Camera]) -> Result<()> {
        if views.is_empty() || views.len() != cameras.len() {
            return Err(Error::shape(
                "view_transform",
                format!("{} views for {} cameras", views.len(), cameras.len()),
            ));
        }
        let shape = views[0].shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape(
                "view_transform",
                format!("views must be [Hc, Wc, {}], got {shape:?}", self.dim),
            ));
        }
        for (v, (_, k)) in views.iter().zip(cameras) {
            if v.shape() != shape {
                return Err(Error::shape("view_transform", "views differ in shape"));
            }
            if k.height != shape[0] || k.width != shape[1] {
                return Err(Error::shape(
                    "view_transform",
                    format!("camera image {}x{} vs feature map {shape:?}", k.height, k.width),
                ));
            }
        }
        Ok(())
    }

    /// Voxel features `[num_points × dim]`; points visible in no view are zero.
    pub fn forward(
        &self,
        store: &ParamStore,
        views: &[Tensor],
        cameras: &[Camera],
        refs: &ReferencePoints,
    ) -> Result<(Tensor, ViewTransformCache)> {
        self.check_views(views, cameras)?;
        let n = refs.points.len();
        let shape = views[0].shape().to_vec();
        let (hc, wc, d) = (shape[0], shape[1], shape[2]);
        let mut queries = Tensor::zeros(&[n, d]);
        let mut keys: Vec<f64> = Vec::new();
        let mut key_taps: Vec<Vec<Tap>> = Vec::new();
        let mut segments: Vec<Range<usize>> = Vec::with_capacity(n);
        for (i, &p) in refs.points.iter().enumerate() {
            let rel: Vec3 = [p[0] - refs.ego[0], p[1] - refs.ego[1], p[2] - refs.ego[2]];
            queries.row_mut(i).copy_from_slice(&positional_encoding(rel, d, self.encoding_scale));
            let start = key_taps.len();
            for (m, (pose, k)) in cameras.iter().enumerate() {
                if !frustum_visible(p, pose, k) {
                    continue;
                }
                let Projection::Image { u, v, .. } = project_point(p, pose, k) else {
                    continue;
                };
                // The image spans [0, Wc) but samples exist on [0, Wc-1]; the
                // last half pixel replicates the border.
                let u = u.clamp(0.0, (wc - 1) as f64);
                let v = v.clamp(0.0, (hc - 1) as f64);
                let mut key = vec![0.0; d];
                let mut taps = Vec::with_capacity(4);
                let data = views[m].data();
                for (pix, wt) in bilinear_taps(hc, wc, u, v).expect("clamped into range") {
                    if wt == 0.0 {
                        continue;
                    }
                    for (kk, x) in key.iter_mut().zip(&data[pix * d..(pix + 1) * d]) {
                        *kk += wt * x;
                    }
                    taps.push((m, pix, wt));
                }
                keys.extend_from_slice(&key);
                key_taps.push(taps);
            }
            segments.push(start..key_taps.len());
        }
        let keys = Tensor::from_vec(&[key_taps.len(), d], keys)?;
        let (mut out, attn) = self.attn.forward_segmented(store, &queries, &keys, &segments)?;
        let rows: Vec<usize> = (0..n).filter(|&i| !segments[i].is_empty()).collect();
        let refine = if self.refine.is_empty() || rows.is_empty() {
            None
        } else {
            let mut x = out.gather_rows(&rows);
            let mut caches = Vec::with_capacity(self.refine.len());
            for block in &self.refine {
                let (y, c) = block.forward(store, &x)?;
                caches.push(c);
                x = y;
            }
            for (r, &i) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(x.row(r));
            }
            Some((caches, rows))
        };
        Ok((
            out,
            ViewTransformCache {
                attn,
                refine,
                key_taps,
                view_shape: shape,
                num_views: views.len(),
            },
        ))
    }

    /// Gradients with respect to each view; parameter gradients accumulate.
    pub fn backward(&self, store: &mut ParamStore, cache: &ViewTransformCache, dout: &Tensor) -> Result<Vec<Tensor>> {
        let mut dvoxel = dout.clone();
        if let Some((caches, rows)) = &cache.refine {
            let mut dx = dout.gather_rows(rows);
            for (block, c) in self.refine.iter().zip(caches).rev() {
                dx = block.backward(store, c, &dx)?;
            }
            for (r, &i) in rows.iter().enumerate() {
                dvoxel.row_mut(i).copy_from_slice(dx.row(r));
            }
        }
        let (_dq, dkeys) = self.attn.backward(store, &cache.attn, &dvoxel)?;
        let d = cache.view_shape[2];
        let mut dviews = vec![Tensor::zeros(&cache.view_shape); cache.num_views];
        for (t, taps) in cache.key_taps.iter().enumerate() {
            let g = dkeys.row(t);
            for &(m, pix, wt) in taps {
                let dst = &mut dviews[m].data_mut()[pix * d..(pix + 1) * d];
                for (a, b) in dst.iter_mut().zip(g) {
                    *a += wt * b;
                }
            }
        }
        Ok(dviews)
    }
}

/// Mean over the height axis: `[H·W·Z × D]` to `[H·W × D]`.
pub fn voxel_pool(voxel: &Tensor, cfg: &BevConfig) -> Result<Tensor> {
    let z = cfg.num_heights;
    if voxel.shape().len() != 2 || voxel.rows() != cfg.num_points() {
        return Err(Error::shape(
            "voxel_pool",
            format!("expected {} voxel rows, got {:?}", cfg.num_points(), voxel.shape()),
        ));
    }
    let d = voxel.cols();
    let mut out = Tensor::zeros(&[cfg.num_cells(), d]);
    for cell in 0..cfg.num_cells() {
        let dst = out.row_mut(cell);
        for k in 0..z {
            for (a, b) in dst.iter_mut().zip(voxel.row(cell * z + k)) {
                *a += b;
            }
        }
        dst.iter_mut().for_each(|a| *a /= z as f64);
    }
    Ok(out)
}

pub fn voxel_pool_backward(dgrid: &Tensor, cfg: &BevConfig) -> Tensor {
    let z = cfg.num_heights;
    let d = dgrid.cols();
    let mut out = Tensor::zeros(&[cfg.num_points(), d]);
    for cell in 0..cfg.num_cells() {
        for k in 0..z {
            for (a, b) in out.row_mut(cell * z + k).iter_mut().zip(dgrid.row(cell)) {
                *a = b / z as f64;
            }
        }
    }
    out
}

/// View transform followed by voxel pooling.
#[derive(Debug, Clone)]
pub struct BevEncoder {
    pub config: BevConfig,
    pub view: ViewTransform,
}

#[derive(Debug, Clone)]
pub struct BevEncoderCache {
    pub view: ViewTransformCache,
}

impl BevEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: BevConfig,
        dims: BlockDims,
        refine_layers: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        config.validate()?;
        let scale = config.range * 1.1;
        Ok(Self {
            config,
            view: ViewTransform::new(store, &format!("{name}.view"), dims, refine_layers, scale, rng)?,
        })
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        views: &[Tensor],
        cameras: &[Camera],
        ego: Vec3,
        step: usize,
    ) -> Result<(BevFeature, BevEncoderCache)> {
        let refs = make_reference_points(&self.config, ego)?;
        let (voxel, view) = self.view.forward(store, views, cameras, &refs)?;
        let grid = voxel_pool(&voxel, &self.config)?;
        grid.ensure_finite("bev grid")?;
        Ok((
            BevFeature {
                grid,
                ego,
                config: self.config,
                step,
            },
            BevEncoderCache { view },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BevEncoderCache, dgrid: &Tensor) -> Result<Vec<Tensor>> {
        let dvoxel = voxel_pool_backward(dgrid, &self.config);
        self.view.backward(store, &cache.view, &dvoxel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_check;
    use crate::numcore::BlockProbe;

    fn small_cfg() -> BevConfig {
        BevConfig { grid_h: 3, grid_w: 3, num_heights: 2, range: 3.0, z_min: 0.0, z_max: 1.5 }
    }

    fn cameras(n: usize) -> Vec<Camera> {
        let k = CameraIntrinsics { fx: 3.0, fy: 3.0, cx: 3.0, cy: 3.0, width: 6, height: 6 };
        (0..n)
            .map(|m| (Pose::level([0.0, 0.0, 1.2], m as f64 * 2.0 * std::f64::consts::PI / n as f64), k))
            .collect()
    }

    fn identity(store: &mut ParamStore, lin: &crate::numcore::Linear) {
        let mut eye = Tensor::zeros(&[lin.d_in, lin.d_out]);
        for i in 0..lin.d_in {
            eye.data_mut()[i * lin.d_out + i] = 1.0;
        }
        *store.value_mut(lin.w) = eye;
        if let Some(b) = lin.b {
            store.value_mut(b).fill(0.0);
        }
    }

    #[test]
    fn invisible_points_are_zero() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let dims = BlockDims { dim: 12, heads: 2, hidden: 16 };
        let vt = ViewTransform::new(&mut store, "vt", dims, 1, 5.5, &mut rng).unwrap();
        let cams = cameras(1);
        let views = vec![Tensor::filled(&[6, 6, 12], 0.3)];
        // Behind the single camera and far above it.
        let refs = ReferencePoints { points: vec![[-2.0, 0.0, 1.0], [3.0, 0.0, 1.0], [0.1, 0.0, 30.0]], ego: [0.0; 3] };
        let (out, cache) = vt.forward(&store, &views, &cams, &refs).unwrap();
        assert_eq!(cache.key_counts(), vec![0, 1, 0]);
        assert!(out.row(0).iter().chain(out.row(2)).all(|&x| x == 0.0));
        assert!(out.row(1).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn identity_attention_passes_constant_views_through() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        let dims = BlockDims { dim: 12, heads: 3, hidden: 16 };
        let mut vt = ViewTransform::new(&mut store, "vt", dims, 0, 5.5, &mut rng).unwrap();
        identity(&mut store, &vt.attn.wv);
        identity(&mut store, &vt.attn.wo);
        vt.attn.residual = false;
        let value: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.4).collect();
        let mut view = Tensor::zeros(&[6, 6, 12]);
        for pix in 0..36 {
            view.data_mut()[pix * 12..(pix + 1) * 12].copy_from_slice(&value);
        }
        let cams = cameras(4);
        let views = vec![view; 4];
        let refs = make_reference_points(&small_cfg(), [0.0; 3]).unwrap();
        let (out, cache) = vt.forward(&store, &views, &cams, &refs).unwrap();
        for (i, &count) in cache.key_counts().iter().enumerate() {
            if count > 0 {
                for (a, b) in out.row(i).iter().zip(&value) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert!(cache.key_counts().iter().any(|&c| c > 0));
    }

    #[test]
    fn voxel_pool_means_over_height() {
        let cfg = BevConfig { grid_h: 1, grid_w: 1, num_heights: 2, ..BevConfig::default() };
        let v = Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(voxel_pool(&v, &cfg).unwrap().data(), &[1.0, 1.0, 1.0]);
        let cfg = BevConfig::default();
        let v = Tensor::filled(&[484, 5], 0.7);
        let g = voxel_pool(&v, &cfg).unwrap();
        assert_eq!(g.shape(), &[121, 5]);
        assert!(g.data().iter().all(|&x| (x - 0.7).abs() < 1e-15));
        assert!(voxel_pool(&Tensor::zeros(&[10, 5]), &cfg).is_err());
    }

    #[test]
    fn rejects_mismatched_views() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        let dims = BlockDims { dim: 12, heads: 3, hidden: 16 };
        let vt = ViewTransform::new(&mut store, "vt", dims, 0, 5.5, &mut rng).unwrap();
        let refs = make_reference_points(&small_cfg(), [0.0; 3]).unwrap();
        let cams = cameras(2);
        let bad_width = vec![Tensor::zeros(&[6, 6, 8]); 2];
        assert!(vt.forward(&store, &bad_width, &cams, &refs).is_err());
        let mixed = vec![Tensor::zeros(&[6, 6, 12]), Tensor::zeros(&[5, 6, 12])];
        assert!(vt.forward(&store, &mixed, &cams, &refs).is_err());
        assert!(vt.forward(&store, &mixed[..1], &cams, &refs).is_err());
    }

    pub(crate) fn view_transform_probe(seed: u64, refine: bool) -> BlockProbe {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let dims = BlockDims { dim: 12, heads: 2, hidden: 8 };
        let cfg = small_cfg();
        let enc = BevEncoder::new(&mut store, "enc", cfg, dims, usize::from(refine), &mut rng).unwrap();
        let cams = cameras(3);
        let views: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_vec(&[6, 6, 12], (0..432).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap())
            .collect();
        let params = store.ids().collect();
        let (fe, be) = (enc.clone(), enc);
        let (fc, bc) = (cams.clone(), cams);
        BlockProbe::new(
            store,
            views,
            params,
            seed,
            Box::new(move |s, x| Ok(fe.encode(s, x, &fc, [0.2, -0.1, 0.0], 0)?.0.grid)),
            Box::new(move |s, x, dy| {
                let (_, c) = be.encode(s, x, &bc, [0.2, -0.1, 0.0], 0)?;
                be.backward(s, &c, dy)
            }),
        )
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..4 {
            for refine in [false, true] {
                let mut probe = view_transform_probe(seed, refine);
                let r = finite_diff_check(&mut probe, 1e-4).unwrap();
                assert!(r.max_rel_error <= 1e-4, "seed {seed} refine {refine}: {r:?}");
            }
        }
    }
}
