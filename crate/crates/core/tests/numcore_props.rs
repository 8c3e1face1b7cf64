use bsg::numcore::{softmax, BlockDims, CrossModalLayer, ParamStore, SelfAttentionBlock};
use bsg::{SplitMix64, Tensor};
use proptest::prelude::*;

fn random(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-700.0..700.0f64, 1..40)) {
        let p = softmax(&logits).unwrap();
        prop_assert!(p.iter().all(|&v| v.is_finite() && v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_passes_are_bitwise_deterministic(seed in any::<u64>(), rows in 1usize..6) {
        let dims = BlockDims { dim: 8, heads: 2, hidden: 16 };
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let block = SelfAttentionBlock::new(&mut store, "b", dims, &mut rng).unwrap();
        let xmod = CrossModalLayer::new(&mut store, "x", dims, &mut rng).unwrap();
        let x = random(&mut rng, rows, 8);
        let ctx = random(&mut rng, 3, 8);
        prop_assert_eq!(block.forward(&store, &x).unwrap().0, block.forward(&store, &x).unwrap().0);
        prop_assert_eq!(xmod.forward(&store, &x, &ctx).unwrap().0, xmod.forward(&store, &x, &ctx).unwrap().0);
    }
}
