//! Synthetic detection environment: scene generation, a tiny dense detector,
//! the detection task loss, and mAP evaluation.

pub mod eval;
pub mod loss;
pub mod model;
pub mod scene;

pub use eval::{decode_predictions, evaluate_map, DecodeParams, Detection, MapMetrics};
pub use loss::{build_targets, detection_task_loss, detection_task_loss_grad, DetectionTargets, FocalParams};
pub use model::{forward_taped, tape_params, DetectorConfig, DetectorOutput, TinyDetector, STRIDE};
pub use scene::{batch_ground_truth, batch_images, generate_scene, SceneSpec, SyntheticScene};
