use serde::{Deserialize, Serialize};

use super::eval::{Detection, SceneDetections};
use super::head::{decode_predictions, DetectionConfig, DetectionHead};
use super::loss::{detection_loss, BoxTarget, LossBreakdown, LossConfig};
use super::scenes::DetectionScene;
use crate::bevtransform::{BevConfig, BevEncoder, BevFeature};
use crate::error::Result;
use crate::numcore::ParamStore;
use crate::rng::SplitMix64;

/// Parameter-name prefix of the BEV encoder.
pub const ENCODER_PREFIX: &str = "bev";
/// Parameter-name prefix of the detection head.
pub const HEAD_PREFIX: &str = "det";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub bev: BevConfig,
    pub head: DetectionConfig,
    pub loss: LossConfig,
    /// Per-voxel refinement layers in the view transform.
    pub refine_layers: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { bev: BevConfig::default(), head: DetectionConfig::default(), loss: LossConfig::default(), refine_layers: 1 }
    }
}

/// BEV encoder plus detection head.
#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub encoder: BevEncoder,
    pub head: DetectionHead,
}

impl Detector {
    pub fn new(store: &mut ParamStore, config: DetectorConfig, rng: &mut SplitMix64) -> Result<Self> {
        let encoder = BevEncoder::new(store, ENCODER_PREFIX, config.bev, config.head.dims(), config.refine_layers, rng)?;
        let head = DetectionHead::new(store, HEAD_PREFIX, config.head, rng)?;
        Ok(Self { config, encoder, head })
    }

    pub fn encode(&self, store: &ParamStore, scene: &DetectionScene) -> Result<BevFeature> {
        Ok(self.encoder.encode(store, &scene.views, &scene.cameras, scene.ego, 0)?.0)
    }

    pub fn targets(&self, scene: &DetectionScene) -> Vec<BoxTarget> {
        scene.ground_truth.iter().map(|b| BoxTarget::from_box(b, scene.ego, self.config.bev.range)).collect()
    }

    /// Loss on one scene; accumulates gradients into `store`.
    pub fn loss_and_backward(&self, store: &mut ParamStore, scene: &DetectionScene) -> Result<LossBreakdown> {
        let (bev, enc_cache) = self.encoder.encode(store, &scene.views, &scene.cameras, scene.ego, 0)?;
        let (out, head_cache) = self.head.forward(store, &bev)?;
        let (loss, grad) = detection_loss(&out, &self.targets(scene), &self.config.loss)?;
        let dgrid = self.head.backward(store, &head_cache, &grad.logits, &grad.boxes)?;
        if !store.ids_with_prefix(&[ENCODER_PREFIX]).iter().all(|&id| store.is_frozen(id)) {
            self.encoder.backward(store, &enc_cache, &dgrid)?;
        }
        Ok(loss)
    }

    pub fn loss(&self, store: &ParamStore, scene: &DetectionScene) -> Result<LossBreakdown> {
        let bev = self.encode(store, scene)?;
        let (out, _) = self.head.forward(store, &bev)?;
        Ok(detection_loss(&out, &self.targets(scene), &self.config.loss)?.0)
    }

    /// One scored box per query, labelled with its best real category.
    pub fn detect(&self, store: &ParamStore, scene: &DetectionScene) -> Result<SceneDetections> {
        let bev = self.encode(store, scene)?;
        let (out, _) = self.head.forward(store, &bev)?;
        let predictions = decode_predictions(&out, scene.ego, self.config.bev.range)?
            .into_iter()
            .map(|p| {
                let (category, confidence) = p.best();
                Detection { category, confidence, bbox: p.bbox }
            })
            .collect();
        Ok(SceneDetections { scene: scene.name(), predictions, ground_truth: scene.ground_truth.clone() })
    }
}
