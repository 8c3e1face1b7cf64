use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bevtransform::{compute_overlap, BevConfig, BevEncoder, BevFeature, TemporalUpdate};
use crate::detection::{detection_loss, BoxTarget, DetectionConfig, DetectionHead, LossConfig};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::numcore::{
    finite_diff_check, BlockDims, BlockProbe, CrossModalLayer, Ffn, MultiHeadAttention, ParamStore,
    SelfAttentionBlock, Tensor,
};
use crate::policy::{NavPolicy, PolicyConfig, TextEncoder};
use crate::rng::SplitMix64;

pub const GRAD_CHECK_STEP: f64 = 1e-4;
pub const GRAD_CHECK_THRESHOLD: f64 = 1e-4;

/// Names of the checked blocks, in report order.
pub const GRAD_CHECK_BLOCKS: [&str; 11] = [
    "attention",
    "self_attention_block",
    "ffn",
    "cross_modal_layer",
    "view_transform",
    "temporal_update",
    "text_encoder",
    "graph_scorer",
    "grid_scorer",
    "detection_head_loss",
    "policy_step",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub block: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSuite {
    pub threshold: f64,
    pub blocks: Vec<BlockResult>,
    pub seconds: f64,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failed_blocks(&self) -> Vec<&str> {
        self.blocks.iter().filter(|b| !b.passed).map(|b| b.block.as_str()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            let verdict = if b.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!(
                "{verdict} {:<22} max_rel_error {:.3e} over {} coords\n",
                b.block, b.max_rel_error, b.coords
            ));
        }
        s
    }
}

fn random(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .expect("shape matches data")
}

fn dims() -> BlockDims {
    BlockDims { dim: 8, heads: 2, hidden: 12 }
}

fn small_bev() -> BevConfig {
    BevConfig { grid_h: 3, grid_w: 3, num_heights: 2, range: 3.0, z_min: 0.0, z_max: 1.5 }
}

fn all_params(store: &ParamStore) -> Vec<crate::numcore::ParamId> {
    store.ids().collect()
}

fn attention_probe(seed: u64) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let attn = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng)?;
    let (q, kv) = (random(&mut rng, 3, 8), random(&mut rng, 5, 8));
    let (fa, ba) = (attn.clone(), attn);
    Ok(BlockProbe::new(
        store.clone(),
        vec![q, kv],
        all_params(&store),
        seed,
        Box::new(move |s, x| Ok(fa.forward(s, &x[0], &x[1])?.0)),
        Box::new(move |s, x, dy| {
            let (_, c) = ba.forward(s, &x[0], &x[1])?;
            let (dq, dkv) = ba.backward(s, &c, dy)?;
            Ok(vec![dq, dkv])
        }),
    ))
}

fn self_attention_probe(seed: u64) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let block = SelfAttentionBlock::new(&mut store, "block", dims(), &mut rng)?;
    let x = random(&mut rng, 4, 8);
    let (fb, bb) = (block.clone(), block);
    Ok(BlockProbe::new(
        store.clone(),
        vec![x],
        all_params(&store),
        seed,
        Box::new(move |s, x| Ok(fb.forward(s, &x[0])?.0)),
        Box::new(move |s, x, dy| {
            let (_, c) = bb.forward(s, &x[0])?;
            Ok(vec![bb.backward(s, &c, dy)?])
        }),
    ))
}

fn ffn_probe(seed: u64) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let ffn = Ffn::new(&mut store, "ffn", 8, 12, 4, &mut rng)?;
    let x = random(&mut rng, 5, 8);
    let (ff, fb) = (ffn.clone(), ffn);
    Ok(BlockProbe::new(
        store.clone(),
        vec![x],
        all_params(&store),
        seed,
        Box::new(move |s, x| Ok(ff.forward(s, &x[0])?.0)),
        Box::new(move |s, x, dy| {
            let (_, c) = fb.forward(s, &x[0])?;
            Ok(vec![fb.backward(s, &c, dy)?])
        }),
    ))
}

fn cross_modal_probe(seed: u64) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let layer = CrossModalLayer::new(&mut store, "xmod", dims(), &mut rng)?;
    let (x, ctx) = (random(&mut rng, 3, 8), random(&mut rng, 4, 8));
    let (fl, bl) = (layer.clone(), layer);
    Ok(BlockProbe::new(
        store.clone(),
        vec![x, ctx],
        all_params(&store),
        seed,
        Box::new(move |s, x| Ok(fl.forward(s, &x[0], &x[1])?.0)),
        Box::new(move |s, x, dy| {
            let (_, c) = bl.forward(s, &x[0], &x[1])?;
            let (dx, dctx) = bl.backward(s, &c, dy)?;
            Ok(vec![dx, dctx])
        }),
    ))
}

fn view_transform_probe(seed: u64) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let enc = BevEncoder::new(&mut store, "bev", small_bev(), dims(), 1, &mut rng)?;
    let k = CameraIntrinsics { fx: 3.0, fy: 3.0, cx: 3.0, cy: 3.0, width: 6, height: 6 };
    let cams: Vec<_> = (0..3)
        .map(|m| (Pose::level([0.0, 0.0, 1.2], m as f64 * 2.0 * std::f64::consts::PI / 3.0), k))
        .collect();
    let views: Vec<Tensor> = (0..3)
        .map(|_| Tensor::from_vec(&[6, 6, 8], (0..288).map(|_| rng.uniform(-1.0, 1.0)).collect()))
        .collect::<Result<_>>()?;
    let ego = [0.2, -0.1, 0.0];
    let (fe, be) = (enc.clone(), enc);
    let (fc, bc) = (cams.clone(), cams);
    Ok(BlockProbe::new(
        store.clone(),
        views,
        all_params(&store),
        seed,
        Box::new(move |s, x| Ok(fe.encode(s, x, &fc, ego, 0)?.0.grid)),
        Box::new(move |s, x, dy| {
            let (_, c) = be.encode(s, x, &bc, ego, 0)?;
            be.backward(s, &c, dy)
        }),
    ))
}

fn temporal_probe(seed: u64) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let t = TemporalUpdate::new(&mut store, "temporal", 8, 2, &mut rng)?;
    let config = BevConfig { grid_h: 5, grid_w: 5, num_heights: 1, range: 2.5, z_min: 0.0, z_max: 0.0 };
    let c = config.cell_size();
    let prev = BevFeature { grid: random(&mut rng, 25, 8), ego: [0.0; 3], config, step: 0 };
    let next = BevFeature { grid: random(&mut rng, 25, 8), ego: [c + 0.05, -c, 0.0], config, step: 1 };
    let overlap = compute_overlap(&prev, &next);
    let (tf, tb) = (t.clone(), t);
    let (pf, pb, nf, nb) = (prev.clone(), prev.clone(), next.clone(), next.clone());
    let (of, ob) = (overlap.clone(), overlap);
    Ok(BlockProbe::new(
        store.clone(),
        vec![prev.grid, next.grid],
        all_params(&store),
        seed,
        Box::new(move |s, x| {
            let p = BevFeature { grid: x[0].clone(), ..pf.clone() };
            let n = BevFeature { grid: x[1].clone(), ..nf.clone() };
            Ok(tf.forward(s, &p, &n, &of)?.0.grid)
        }),
        Box::new(move |s, x, dy| {
            let p = BevFeature { grid: x[0].clone(), ..pb.clone() };
            let n = BevFeature { grid: x[1].clone(), ..nb.clone() };
            let (_, cache) = tb.forward(s, &p, &n, &ob)?;
            let (dp, dn) = tb.backward(s, &cache, dy)?;
            Ok(vec![dp, dn])
        }),
    ))
}

fn text_probe(seed: u64) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let enc = TextEncoder::new(&mut store, "text", 6, dims(), 1, &mut rng)?;
    let tokens = vec![2usize, 5, 2, 0];
    let (fe, be, ft) = (enc.clone(), enc, tokens.clone());
    Ok(BlockProbe::new(
        store.clone(),
        vec![],
        all_params(&store),
        seed,
        Box::new(move |s, _| Ok(fe.forward(s, &ft)?.0)),
        Box::new(move |s, _, dy| {
            let (_, c) = be.forward(s, &tokens)?;
            be.backward(s, &c, dy)?;
            Ok(vec![])
        }),
    ))
}

fn small_policy(store: &mut ParamStore, rng: &mut SplitMix64) -> Result<NavPolicy> {
    let config = PolicyConfig { dim: 8, heads: 2, hidden: 12, text_layers: 1, vocab_size: 10, ..PolicyConfig::default() };
    NavPolicy::new(store, config, rng)
}

fn scorer_probe(seed: u64, graph_branch: bool) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let p = small_policy(&mut store, &mut rng)?;
    let text = random(&mut rng, 3, 8);
    let rows = if graph_branch { 4 } else { 121 };
    let other = random(&mut rng, rows, 8);
    let params = store.ids_with_prefix(&[if graph_branch { "policy.graph" } else { "policy.grid" }]);
    let (fp, bp) = (p.clone(), p);
    Ok(BlockProbe::new(
        store,
        vec![other, text],
        params,
        seed,
        Box::new(move |s, x| {
            let scores =
                if graph_branch { fp.graph.forward(s, &x[0], &x[1])?.0 } else { fp.grid.forward(s, &x[0], &x[1])?.0 };
            Tensor::from_vec(&[scores.len(), 1], scores)
        }),
        Box::new(move |s, x, dy| {
            let (a, b) = if graph_branch {
                let (_, c) = bp.graph.forward(s, &x[0], &x[1])?;
                bp.graph.backward(s, &c, dy.data())?
            } else {
                let (_, c) = bp.grid.forward(s, &x[0], &x[1])?;
                bp.grid.backward(s, &c, dy.data())?
            };
            Ok(vec![a, b])
        }),
    ))
}

fn detection_probe(seed: u64) -> Result<BlockProbe> {
    let config = DetectionConfig {
        num_queries: 6,
        num_layers: 2,
        num_classes: 3,
        dim: 8,
        heads: 2,
        hidden: 12,
        ..DetectionConfig::default()
    };
    let bev = small_bev();
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let head = DetectionHead::new(&mut store, "det", config, &mut rng)?;
    let grid = random(&mut rng, bev.num_cells(), 8);
    let targets: Vec<BoxTarget> = (0..3)
        .map(|g| BoxTarget { category: g % 3, params: std::array::from_fn(|_| rng.uniform(-0.5, 0.5)) })
        .collect();
    let (h1, h2) = (head.clone(), head);
    let (t1, t2) = (targets.clone(), targets);
    let feature = move |g: &Tensor| BevFeature { grid: g.clone(), ego: [0.0; 3], config: bev, step: 0 };
    Ok(BlockProbe::new(
        store.clone(),
        vec![grid],
        all_params(&store),
        seed,
        Box::new(move |s, xs| {
            let (out, _) = h1.forward(s, &feature(&xs[0]))?;
            let (l, _) = detection_loss(&out, &t1, &LossConfig::default())?;
            Ok(Tensor::vector(vec![l.total]))
        }),
        Box::new(move |s, xs, dy| {
            let (out, cache) = h2.forward(s, &feature(&xs[0]))?;
            let (_, mut g) = detection_loss(&out, &t2, &LossConfig::default())?;
            g.logits.scale(dy.data()[0]);
            g.boxes.scale(dy.data()[0]);
            Ok(vec![h2.backward(s, &cache, &g.logits, &g.boxes)?])
        }),
    ))
}

fn policy_step_probe(seed: u64) -> Result<BlockProbe> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let p = small_policy(&mut store, &mut rng)?;
    let config = BevConfig::default();
    let bev_at = |ego: [f64; 3], rng: &mut SplitMix64| BevFeature {
        grid: random(rng, config.num_cells(), 8),
        ego,
        config,
        step: 0,
    };
    let mut g = p.new_graph();
    let b1 = bev_at([2.0, 0.0, 0.0], &mut rng);
    g.update(&b1, 1, b1.ego, &[(0, [0.0; 3]), (3, [4.0, 1.0, 0.0])])?;
    let bev = bev_at([0.0; 3], &mut rng);
    g.update(&bev, 0, bev.ego, &[(1, [2.0, 0.0, 0.0]), (2, [0.0, -2.5, 0.0])])?;
    let text = random(&mut rng, 3, 8);
    let params = store.ids_with_prefix(&["policy.graph", "policy.grid", "policy.stop"]);
    let (fp, bp) = (p.clone(), p);
    let (fg, bg) = (g.clone(), g);
    let (fb, bb) = (bev.clone(), bev.clone());
    Ok(BlockProbe::new(
        store,
        vec![text, bev.grid],
        params,
        seed,
        Box::new(move |s, x| {
            let b = BevFeature { grid: x[1].clone(), ..fb.clone() };
            let (set, _) = fp.step(s, &fg, &b, &x[0], &[1, 2])?;
            Tensor::from_vec(&[set.fused.len(), 1], set.fused)
        }),
        Box::new(move |s, x, dy| {
            let b = BevFeature { grid: x[1].clone(), ..bb.clone() };
            let (_, c) = bp.step(s, &bg, &b, &x[0], &[1, 2])?;
            let (dt, dg) = bp.step_backward(s, &c, dy.data())?;
            Ok(vec![dt, dg])
        }),
    ))
}

fn probe_for(block: &str, seed: u64) -> Result<BlockProbe> {
    match block {
        "attention" => attention_probe(seed),
        "self_attention_block" => self_attention_probe(seed),
        "ffn" => ffn_probe(seed),
        "cross_modal_layer" => cross_modal_probe(seed),
        "view_transform" => view_transform_probe(seed),
        "temporal_update" => temporal_probe(seed),
        "text_encoder" => text_probe(seed),
        "graph_scorer" => scorer_probe(seed, true),
        "grid_scorer" => scorer_probe(seed, false),
        "detection_head_loss" => detection_probe(seed),
        "policy_step" => policy_step_probe(seed),
        other => Err(crate::Error::InvalidArgument(format!("unknown gradient-check block {other}"))),
    }
}

/// Central-difference check of every differentiable block. A block named in
/// `faulty` has its analytic gradient scaled by 1.5 first.
pub fn grad_check_suite(seed: u64, faulty: Option<&str>) -> Result<GradCheckSuite> {
    if let Some(f) = faulty {
        if !GRAD_CHECK_BLOCKS.contains(&f) {
            return Err(crate::Error::InvalidArgument(format!("unknown gradient-check block {f}")));
        }
    }
    let t0 = Instant::now();
    let mut blocks = Vec::with_capacity(GRAD_CHECK_BLOCKS.len());
    for (i, &name) in GRAD_CHECK_BLOCKS.iter().enumerate() {
        let mut probe = probe_for(name, SplitMix64::derive(seed, i as u64).next_u64())?;
        if faulty == Some(name) {
            probe.gradient_scale = 1.5;
        }
        let r = finite_diff_check(&mut probe, GRAD_CHECK_STEP)?;
        blocks.push(BlockResult {
            block: name.to_string(),
            max_rel_error: r.max_rel_error,
            coords: r.checked,
            passed: r.max_rel_error <= GRAD_CHECK_THRESHOLD,
        });
    }
    Ok(GradCheckSuite { threshold: GRAD_CHECK_THRESHOLD, blocks, seconds: t0.elapsed().as_secs_f64() })
}
