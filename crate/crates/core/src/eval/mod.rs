//! Frame-mAP, tube linking, video-mAP and error analysis.

pub mod ap;
pub mod errors;
pub mod linking;
pub mod report;
pub mod video;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ap::{average_precision, frame_ap, mean_ap};
pub use errors::{classify_detection, error_analysis, ErrorBreakdown, ErrorKind};
pub use linking::{best_path, link_detections, link_tubes, path_value, ScoredBox};
pub use report::{evaluate, MetricsReport};
pub use video::{ground_truth_tubes, video_ap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Weight of the IoU bonus between consecutive boxes when linking.
    pub link_alpha: f64,
    pub top_k_error_analysis: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            link_alpha: 1.0,
            top_k_error_analysis: 1000,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "iou_threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        if !(self.link_alpha >= 0.0 && self.link_alpha.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "link_alpha {} must be finite and non-negative",
                self.link_alpha
            )));
        }
        Ok(())
    }
}
