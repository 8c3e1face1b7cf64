//! Set-prediction 3D box detection on BEV features: head, bipartite
//! matching, focal/L1 loss and AP/AR evaluation.

mod eval;
mod head;
mod loss;
mod matching;
mod model;
mod scenes;

pub use eval::{average_precision, eval_ap_ar, ApArReport, CategoryMetrics, Detection, SceneDetections, IOU_THRESHOLDS};
pub use head::{
    box_params, box_params_grad, decode_params, decode_predictions, detect_forward, encode_box, sigmoid, softplus,
    DetectionConfig, DetectionHead, DetectionHeadCache, HeadOutput, Prediction, BOX_PARAMS,
};
pub use loss::{detection_loss, focal_term, matching_cost, BoxTarget, HeadOutputGrad, LossBreakdown, LossConfig};
pub use matching::{assignment_cost, hungarian_match, MatchResult};
pub use model::{Detector, DetectorConfig, ENCODER_PREFIX, HEAD_PREFIX};
pub use scenes::{build_scene, generate_scenes, scene_ground_truth, DetectionScene};
