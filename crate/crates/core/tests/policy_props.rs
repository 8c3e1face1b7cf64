use bsg::bevtransform::{BevConfig, BevFeature};
use bsg::numcore::ParamStore;
use bsg::policy::{
    fuse_scores, gaussian_weights, pool_grid_to_candidates, select_action, GaussianPoolConfig, NavPolicy, PolicyConfig,
    ScoreSet, SelectMode,
};
use bsg::scenegraph::grid_neighborhood;
use bsg::{SplitMix64, Tensor};
use proptest::prelude::*;

fn bev_with(grid: Tensor, ego: [f64; 3]) -> BevFeature {
    BevFeature { grid, ego, config: BevConfig::default(), step: 0 }
}

fn zero_bev() -> BevFeature {
    bev_with(Tensor::zeros(&[121, 4]), [0.0; 3])
}

fn cov_strategy() -> impl Strategy<Value = GaussianPoolConfig> {
    (0.2..4.0f64, 0.2..4.0f64, -0.9..0.9f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(sx, sy, rho, mx, my)| {
        let c = rho * (sx * sy).sqrt();
        GaussianPoolConfig { mean: [mx, my], covariance: [[sx, c], [c, sy]] }
    })
}

proptest! {
    #[test]
    fn gaussian_weights_are_a_distribution(
        cfg in cov_strategy(),
        x in -4.0..4.0f64,
        y in -4.0..4.0f64,
        k in prop::sample::select(vec![1usize, 4, 9, 16]),
    ) {
        let nb = grid_neighborhood(&zero_bev(), [x, y, 0.0], k).unwrap();
        let w = gaussian_weights(&nb.offsets, &cfg).unwrap();
        prop_assert_eq!(w.len(), k);
        prop_assert!(w.iter().all(|&v| v > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pooling_is_linear(seed in any::<u64>(), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let mut rng = SplitMix64::new(seed);
        let s1: Vec<f64> = (0..121).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let s2: Vec<f64> = (0..121).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let bev = zero_bev();
        let nbs: Vec<_> = (0..4)
            .map(|_| grid_neighborhood(&bev, [rng.uniform(-4.5, 4.5), rng.uniform(-4.5, 4.5), 0.0], 9).unwrap())
            .collect();
        let cfg = GaussianPoolConfig::default();
        let mix: Vec<f64> = s1.iter().zip(&s2).map(|(x, y)| a * x + b * y).collect();
        let lhs = pool_grid_to_candidates(&mix, &nbs, &cfg).unwrap();
        let p1 = pool_grid_to_candidates(&s1, &nbs, &cfg).unwrap();
        let p2 = pool_grid_to_candidates(&s2, &nbs, &cfg).unwrap();
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * p1[i] + b * p2[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_endpoints_are_bitwise(lifted in prop::collection::vec(-1e6..1e6f64, 1..20), seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let graph: Vec<f64> = lifted.iter().map(|_| rng.uniform(-1e6, 1e6)).collect();
        let one = fuse_scores(&lifted, &graph, 1.0).unwrap();
        let zero = fuse_scores(&lifted, &graph, 0.0).unwrap();
        for i in 0..lifted.len() {
            prop_assert_eq!(one[i].to_bits(), lifted[i].to_bits());
            prop_assert_eq!(zero[i].to_bits(), graph[i].to_bits());
        }
    }

    #[test]
    fn greedy_is_invariant_to_monotone_transforms(
        fused in prop::collection::vec(-5.0..5.0f64, 5),
        scale in 0.1..10.0f64,
        shift in -100.0..100.0f64,
    ) {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let config = PolicyConfig { dim: 4, heads: 1, hidden: 4, vocab_size: 4, ..PolicyConfig::default() };
        let policy = NavPolicy::new(&mut store, config, &mut rng).unwrap();
        let mut graph = policy.new_graph();
        let bev = zero_bev();
        let cands = [(1, [2.0, 0.0, 0.0]), (2, [0.0, 2.0, 0.0]), (3, [-2.0, 0.0, 0.0])];
        graph.update(&bev, 0, [0.0; 3], &cands).unwrap();
        let set = |f: Vec<f64>| ScoreSet {
            node_ids: vec![0, 1, 2, 3],
            candidates: vec![1, 2, 3],
            graph: vec![0.0; 5],
            grid: vec![],
            candidate: vec![],
            lifted: vec![0.0; 5],
            valid: vec![false, true, true, true, true],
            fused: f,
        };
        let base = select_action(&set(fused.clone()), &graph, SelectMode::Greedy, &mut rng).unwrap();
        let transforms: [Box<dyn Fn(f64) -> f64>; 3] = [
            Box::new(|v| v + shift),
            Box::new(|v| scale * v),
            Box::new(|v| v.powi(3) + v),
        ];
        for t in &transforms {
            let moved = select_action(&set(fused.iter().map(|&v| t(v)).collect()), &graph, SelectMode::Greedy, &mut rng).unwrap();
            prop_assert_eq!(&moved, &base);
        }
    }
}
