mod common;

use bsg::detection::{
    box_params, detection_loss, eval_ap_ar, generate_scenes, hungarian_match, BoxTarget, Detection, HeadOutput,
    LossConfig, SceneDetections, BOX_PARAMS, IOU_THRESHOLDS,
};
use bsg::harness::{new_detector, RunConfig};
use bsg::{ParamStore, SplitMix64, Tensor};
use common::oracles::{brute_force_assignment, random_box};
use proptest::prelude::*;

const CLASSES: usize = 8;

fn random_output(rng: &mut SplitMix64, queries: usize) -> HeadOutput {
    let mut logits = Tensor::zeros(&[queries, CLASSES + 1]);
    let mut boxes = Tensor::zeros(&[queries, BOX_PARAMS]);
    for v in logits.data_mut().iter_mut().chain(boxes.data_mut().iter_mut()) {
        *v = rng.uniform(-3.0, 3.0);
    }
    HeadOutput { logits, boxes }
}

fn random_targets(rng: &mut SplitMix64, count: usize) -> Vec<BoxTarget> {
    (0..count)
        .map(|_| {
            let mut params = [0.0; BOX_PARAMS];
            for v in &mut params {
                *v = rng.uniform(-1.0, 1.0);
            }
            BoxTarget { category: rng.below(CLASSES), params }
        })
        .collect()
}

/// Output whose first `targets.len()` queries reproduce the targets exactly
/// and whose remaining queries confidently predict no-object.
fn exact_output(rng: &mut SplitMix64, queries: usize, count: usize) -> (HeadOutput, Vec<BoxTarget>) {
    let mut out = random_output(rng, queries);
    let mut targets = Vec::with_capacity(count);
    for q in 0..queries {
        let class = if q < count { rng.below(CLASSES) } else { CLASSES };
        for (k, v) in out.logits.row_mut(q).iter_mut().enumerate() {
            *v = if k == class { 800.0 } else { 0.0 };
        }
        if q < count {
            targets.push(BoxTarget { category: class, params: box_params(out.boxes.row(q)) });
        }
    }
    (out, targets)
}

proptest! {
    #[test]
    fn hungarian_is_optimal(seed in any::<u64>(), g in 1usize..=6, extra in 0usize..3) {
        let mut rng = SplitMix64::new(seed);
        let n = g + extra;
        let rows: Vec<Vec<f64>> = (0..g).map(|_| (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect()).collect();
        let cost = Tensor::from_vec(&[g, n], rows.concat()).unwrap();
        let m = hungarian_match(&cost).unwrap();
        let mut cols = m.assignment.clone();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), g);
        let sum: f64 = m.assignment.iter().enumerate().map(|(r, &c)| rows[r][c]).sum();
        prop_assert!((sum - m.total_cost).abs() < 1e-9);
        prop_assert!((m.total_cost - brute_force_assignment(&rows)).abs() < 1e-9);
    }

    #[test]
    fn detection_loss_is_non_negative(seed in any::<u64>(), count in 0usize..=8) {
        let mut rng = SplitMix64::new(seed);
        let out = random_output(&mut rng, 16);
        let targets = random_targets(&mut rng, count);
        let (loss, _) = detection_loss(&out, &targets, &LossConfig::default()).unwrap();
        prop_assert!(loss.total >= 0.0 && loss.focal >= 0.0 && loss.l1 >= 0.0);
    }

    #[test]
    fn detection_loss_vanishes_only_on_exact_predictions(
        seed in any::<u64>(), count in 1usize..=8, q in 0usize..16, k in 0usize..BOX_PARAMS,
    ) {
        let mut rng = SplitMix64::new(seed);
        let (out, targets) = exact_output(&mut rng, 16, count);
        let cfg = LossConfig::default();
        prop_assert_eq!(detection_loss(&out, &targets, &cfg).unwrap().0.total, 0.0);

        let mut wrong_class = out.clone();
        for v in wrong_class.logits.row_mut(q) {
            *v = 0.0;
        }
        prop_assert!(detection_loss(&wrong_class, &targets, &cfg).unwrap().0.total > 0.0);

        let mut wrong_box = out.clone();
        wrong_box.boxes.row_mut(q % count)[k] += 0.25;
        prop_assert!(detection_loss(&wrong_box, &targets, &cfg).unwrap().0.total > 0.0);
    }

    #[test]
    fn ap_ar_ignores_prediction_order(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let mut scenes: Vec<SceneDetections> = (0..4)
            .map(|s| {
                let ground_truth: Vec<_> = (0..1 + rng.below(5)).map(|_| random_box(&mut rng, 4.0)).collect();
                let mut predictions = Vec::new();
                for g in &ground_truth {
                    if rng.next_f64() < 0.7 {
                        let mut b = *g;
                        b.center[0] += rng.uniform(-0.3, 0.3);
                        predictions.push(Detection { category: b.category, confidence: 0.0, bbox: b });
                    }
                }
                for _ in 0..rng.below(4) {
                    let b = random_box(&mut rng, 4.0);
                    predictions.push(Detection { category: b.category, confidence: 0.0, bbox: b });
                }
                SceneDetections { scene: format!("s{s}"), predictions, ground_truth }
            })
            .collect();
        let total: usize = scenes.iter().map(|s| s.predictions.len()).sum();
        let mut confidences: Vec<f64> = (0..total).map(|i| (i as f64 + 0.5) / total as f64).collect();
        for i in (1..confidences.len()).rev() {
            confidences.swap(i, rng.below(i + 1));
        }
        let mut it = confidences.into_iter();
        for s in &mut scenes {
            for d in &mut s.predictions {
                d.confidence = it.next().unwrap();
            }
        }
        let classes = CLASSES;
        let before = eval_ap_ar(&scenes, classes, &IOU_THRESHOLDS).unwrap();
        for s in &mut scenes {
            for i in (1..s.predictions.len()).rev() {
                s.predictions.swap(i, rng.below(i + 1));
            }
        }
        scenes.reverse();
        let after = eval_ap_ar(&scenes, classes, &IOU_THRESHOLDS).unwrap();
        prop_assert_eq!(before, after);
    }
}

/// Head-only full-batch Adam on 50 fixed scenes: the loss drops at every one
/// of the first 100 steps.
#[test]
fn head_training_strictly_decreases_loss() {
    let cfg = RunConfig::default();
    let (mut store, detector): (ParamStore, _) = new_detector(&cfg).unwrap();
    store.set_frozen(&["bev"], true);
    let scenes = generate_scenes(7, 50, cfg.detector.max_objects, cfg.model.dim, &cfg.bev).unwrap();
    let bevs: Vec<_> = scenes.iter().map(|s| detector.encode(&store, s).unwrap()).collect();
    let targets: Vec<_> = scenes.iter().map(|s| detector.targets(s)).collect();
    let mut losses = Vec::with_capacity(101);
    for step in 0..=100 {
        store.zero_grads();
        let mut total = 0.0;
        for (bev, t) in bevs.iter().zip(&targets) {
            let (out, cache) = detector.head.forward(&store, bev).unwrap();
            let (loss, grad) = detection_loss(&out, t, &detector.config.loss).unwrap();
            total += loss.total;
            if step < 100 {
                detector.head.backward(&mut store, &cache, &grad.logits, &grad.boxes).unwrap();
            }
        }
        losses.push(total / bevs.len() as f64);
        if step < 100 {
            store.scale_grads(1.0 / bevs.len() as f64);
            store.adam_step(1e-4).unwrap();
        }
    }
    for (i, w) in losses.windows(2).enumerate() {
        assert!(w[1] < w[0], "loss rose at step {}: {} -> {}", i + 1, w[0], w[1]);
    }
}
