use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bevtransform::BevConfig;
use crate::detection::{DetectionConfig, DetectorConfig, LossConfig};
use crate::error::{Error, Result};
use crate::policy::{GaussianPoolConfig, PolicyConfig};
use crate::scenegraph::NEIGHBORHOOD_SIZES;
use crate::synthworld::{SizeClass, Vocabulary, DEFAULT_MAX_STEPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

/// Adam with linear warmup and cosine decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub learning_rate: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_fraction: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Schedule {
    pub fn lr_at(&self, it: usize, total: usize) -> f64 {
        if it < self.warmup {
            return self.learning_rate * (it + 1) as f64 / self.warmup as f64;
        }
        let span = total.saturating_sub(self.warmup).max(1) as f64;
        let t = ((it - self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.learning_rate * (self.min_lr_fraction + (1.0 - self.min_lr_fraction) * cos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub schedule: Schedule,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub refine_layers: usize,
    /// Scenes with more ground-truth boxes are skipped.
    pub max_objects: usize,
    pub eval_scenes: usize,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTrainConfig {
    pub iterations: usize,
    /// Episodes per mini-batch.
    pub batch: usize,
    pub schedule: Schedule,
    pub text_layers: usize,
    /// Validation SR every this many iterations; `0` disables it.
    pub validate_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub size: SizeClass,
    pub train_worlds: usize,
    pub val_worlds: usize,
    pub test_worlds: usize,
    pub episodes_per_world: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelDims,
    pub bev: BevConfig,
    /// `W_f`.
    pub fusion_weight: f64,
    pub neighborhood: usize,
    pub pool: GaussianPoolConfig,
    pub max_steps: usize,
    pub detector: DetectorTrainConfig,
    pub agent: AgentTrainConfig,
    pub corpus: CorpusConfig,
    /// Keep the BEV encoder fixed while training the agent.
    pub freeze_bev: bool,
    pub fusion_sweep: Vec<f64>,
    pub neighborhood_sweep: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelDims { dim: 32, heads: 4, hidden: 64 },
            bev: BevConfig::default(),
            fusion_weight: 0.5,
            neighborhood: 9,
            pool: GaussianPoolConfig::default(),
            max_steps: DEFAULT_MAX_STEPS,
            detector: DetectorTrainConfig {
                iterations: 2000,
                batch: 8,
                schedule: Schedule { learning_rate: 1e-2, warmup: 100, min_lr_fraction: 0.05, clip_norm: 1.0 },
                num_queries: 32,
                decoder_layers: 2,
                refine_layers: 1,
                max_objects: 8,
                eval_scenes: 20,
                loss: LossConfig::default(),
            },
            agent: AgentTrainConfig {
                iterations: 3000,
                batch: 8,
                schedule: Schedule { learning_rate: 1e-3, warmup: 100, min_lr_fraction: 0.05, clip_norm: 1.0 },
                text_layers: 1,
                validate_every: 500,
            },
            corpus: CorpusConfig {
                size: SizeClass::Medium,
                train_worlds: 1000,
                val_worlds: 20,
                test_worlds: 50,
                episodes_per_world: 1,
            },
            freeze_bev: true,
            fusion_sweep: vec![0.0, 0.5, 1.0],
            neighborhood_sweep: NEIGHBORHOOD_SIZES.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.bev.validate()?;
        let m = &self.model;
        if m.dim == 0 || m.heads == 0 || !m.dim.is_multiple_of(m.heads) || m.dim < 8 {
            return Err(Error::InvalidArgument(format!("model dims {m:?}")));
        }
        for w in std::iter::once(&self.fusion_weight).chain(&self.fusion_sweep) {
            if !(0.0..=1.0).contains(w) {
                return Err(Error::InvalidArgument(format!("fusion weight {w} outside [0, 1]")));
            }
        }
        for k in std::iter::once(&self.neighborhood).chain(&self.neighborhood_sweep) {
            if !NEIGHBORHOOD_SIZES.contains(k) {
                return Err(Error::InvalidArgument(format!("neighborhood size {k} not in {NEIGHBORHOOD_SIZES:?}")));
            }
        }
        self.pool.precision()?;
        if self.max_steps == 0 || self.detector.batch == 0 || self.agent.batch == 0 {
            return Err(Error::InvalidArgument("max_steps and batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let m = self.model;
        DetectorConfig {
            bev: self.bev,
            head: DetectionConfig {
                num_queries: self.detector.num_queries,
                num_layers: self.detector.decoder_layers,
                dim: m.dim,
                heads: m.heads,
                hidden: m.hidden,
                ..DetectionConfig::default()
            },
            loss: self.detector.loss,
            refine_layers: self.detector.refine_layers,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let m = self.model;
        PolicyConfig {
            dim: m.dim,
            heads: m.heads,
            hidden: m.hidden,
            text_layers: self.agent.text_layers,
            vocab_size: Vocabulary::default().len(),
            fusion_weight: self.fusion_weight,
            neighborhood: self.neighborhood,
            pool: self.pool,
        }
    }
}
