//! Restoration quality and detection metrics.

pub mod detection;
pub mod metrics;

pub use detection::{
    average_precision, iou, map_evaluate, match_detections, ApResult, Bbox, Detection, GroundTruth, Outcome,
    SizeFilter,
};
pub use metrics::{psnr, ssim};
