use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::manifest::{write_artifact, Manifest};
use crate::detection::{eval_ap_ar, generate_scenes, ApArReport, DetectionScene, Detector, IOU_THRESHOLDS};
use crate::error::{Error, Result};
use crate::numcore::{Checkpoint, ParamStore};
use crate::rng::SplitMix64;
use crate::synthworld::{CATEGORIES, NUM_CATEGORIES};

const INIT_STREAM: u64 = 0xD0;
const TRAIN_STREAM: u64 = 0xD1;
const TEST_STREAM: u64 = 0xD2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorLossRow {
    pub iteration: usize,
    pub learning_rate: f64,
    /// Batch mean of the total loss.
    pub loss: f64,
    pub focal: f64,
    pub l1: f64,
    pub grad_norm: f64,
}

pub struct DetectorRun {
    pub store: ParamStore,
    pub detector: Detector,
    pub losses: Vec<DetectorLossRow>,
    pub seconds: f64,
}

impl DetectorRun {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(serde_json::to_value(self.detector.config)?, &self.store))
    }
}

pub fn loss_csv(rows: &[DetectorLossRow]) -> String {
    let mut s = String::from("iteration,lr,loss,focal,l1,grad_norm\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{},{},{},{}", r.iteration, r.learning_rate, r.loss, r.focal, r.l1, r.grad_norm);
    }
    s
}

/// Synthetic scenes for one training iteration.
pub fn training_scenes(cfg: &RunConfig, iteration: usize) -> Result<Vec<DetectionScene>> {
    let seed = SplitMix64::derive(cfg.seed, TRAIN_STREAM ^ ((iteration as u64) << 8)).next_u64();
    generate_scenes(seed, cfg.detector.batch, cfg.detector.max_objects, cfg.model.dim, &cfg.bev)
}

/// Held-out scenes, disjoint in seed stream from training.
pub fn held_out_scenes(cfg: &RunConfig) -> Result<Vec<DetectionScene>> {
    let seed = SplitMix64::derive(cfg.seed, TEST_STREAM).next_u64();
    generate_scenes(seed, cfg.detector.eval_scenes, cfg.detector.max_objects, cfg.model.dim, &cfg.bev)
}

pub fn new_detector(cfg: &RunConfig) -> Result<(ParamStore, Detector)> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::derive(cfg.seed, INIT_STREAM);
    let detector = Detector::new(&mut store, cfg.detector_config(), &mut rng)?;
    Ok((store, detector))
}

/// Trains the BEV encoder and detection head on fresh synthetic scenes.
/// `on_row` sees every loss row as it is produced.
pub fn train_detector(cfg: &RunConfig, mut on_row: impl FnMut(&DetectorLossRow)) -> Result<DetectorRun> {
    cfg.validate()?;
    let (mut store, detector) = new_detector(cfg)?;
    let t0 = Instant::now();
    let total = cfg.detector.iterations;
    let sched = cfg.detector.schedule;
    let mut losses = Vec::with_capacity(total);
    for it in 0..total {
        let scenes = training_scenes(cfg, it)?;
        store.zero_grads();
        let (mut loss, mut focal, mut l1) = (0.0, 0.0, 0.0);
        for s in &scenes {
            let b = detector.loss_and_backward(&mut store, s)?;
            let norm = b.num_targets.max(1) as f64;
            loss += b.total;
            focal += b.focal / norm;
            l1 += b.l1 / norm;
        }
        let n = scenes.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("detector loss {loss} at iteration {}", it + 1)));
        }
        store.scale_grads(1.0 / n);
        let grad_norm =
            if sched.clip_norm > 0.0 { store.clip_grad_norm(sched.clip_norm) } else { store.grad_norm() };
        let lr = sched.lr_at(it, total);
        store.adam_step(lr)?;
        let row = DetectorLossRow {
            iteration: it + 1,
            learning_rate: lr,
            loss: loss / n,
            focal: focal / n,
            l1: l1 / n,
            grad_norm,
        };
        on_row(&row);
        losses.push(row);
    }
    Ok(DetectorRun { store, detector, losses, seconds: t0.elapsed().as_secs_f64() })
}

/// AP/AR of `detector` on `scenes`.
pub fn evaluate_detector(store: &ParamStore, detector: &Detector, scenes: &[DetectionScene]) -> Result<ApArReport> {
    let dets = scenes.iter().map(|s| detector.detect(store, s)).collect::<Result<Vec<_>>>()?;
    eval_ap_ar(&dets, NUM_CATEGORIES, &IOU_THRESHOLDS)
}

pub fn category_names() -> Vec<&'static str> {
    CATEGORIES.iter().map(|c| c.name).collect()
}

/// Writes the loss curve, checkpoint and manifest of a finished run.
pub fn save_detector_run(cfg: &RunConfig, run: &DetectorRun, out: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out)?;
    let mut manifest = Manifest::new("train-detector", cfg)?;
    write_artifact(&mut manifest, out, "detector_loss.csv", loss_csv(&run.losses).as_bytes())?;
    write_artifact(&mut manifest, out, "detector.ckpt", &run.checkpoint()?.to_bytes())?;
    manifest.note("seconds", run.seconds);
    manifest.save(out)?;
    Ok(manifest)
}

pub fn load_detector(cfg: &RunConfig, path: &Path) -> Result<(ParamStore, Detector)> {
    let ckpt = Checkpoint::read(std::fs::File::open(path)?)?;
    let (mut store, detector) = new_detector(cfg)?;
    if ckpt.model_config != serde_json::to_value(detector.config)? {
        return Err(Error::Checkpoint("detector checkpoint was trained with different dims".into()));
    }
    ckpt.load_into(&mut store)?;
    Ok((store, detector))
}
