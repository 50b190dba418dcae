use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::{
    error_analysis, frame_ap, ground_truth_tubes, link_detections, mean_ap, video_ap, EvalConfig,
    ErrorBreakdown,
};
use crate::records::{Detection, GroundTruthInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_threshold: f64,
    /// Per-class frame AP; `None` when the class has no ground truth.
    pub frame_ap: BTreeMap<u32, Option<f64>>,
    pub video_ap: BTreeMap<u32, Option<f64>>,
    pub frame_map: f64,
    pub video_map: f64,
    pub errors: ErrorBreakdown,
    pub num_detections: usize,
    pub num_tubes: usize,
}

pub fn evaluate(
    detections: &[Detection],
    ground_truth: &[GroundTruthInstance],
    num_frames: &BTreeMap<u32, u32>,
    num_classes: u32,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    let thr = config.iou_threshold;
    let frame: BTreeMap<u32, Option<f64>> = (0..num_classes)
        .map(|c| (c, frame_ap(detections, ground_truth, c, thr)))
        .collect();
    let tubes = link_detections(detections, num_frames, config.link_alpha)?;
    let gt_tubes = ground_truth_tubes(ground_truth)?;
    let video: BTreeMap<u32, Option<f64>> = (0..num_classes)
        .map(|c| (c, video_ap(&tubes, &gt_tubes, c, thr)))
        .collect();
    let pairs = |m: &BTreeMap<u32, Option<f64>>| m.iter().map(|(&c, &a)| (c, a)).collect::<Vec<_>>();
    Ok(MetricsReport {
        iou_threshold: thr,
        frame_map: mean_ap(&pairs(&frame)),
        video_map: mean_ap(&pairs(&video)),
        frame_ap: frame,
        video_ap: video,
        errors: error_analysis(detections, ground_truth, config.top_k_error_analysis),
        num_detections: detections.len(),
        num_tubes: tubes.len(),
    })
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "nan".to_string(), |v| format!("{v}"))
}

impl MetricsReport {
    /// `key=value` lines, one metric each.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "iou_threshold={}", self.iou_threshold);
        for (c, ap) in &self.frame_ap {
            let _ = writeln!(out, "frame_ap.{c}={}", fmt_ap(*ap));
        }
        for (c, ap) in &self.video_ap {
            let _ = writeln!(out, "video_ap.{c}={}", fmt_ap(*ap));
        }
        let _ = writeln!(out, "frame_map={}", self.frame_map);
        let _ = writeln!(out, "video_map={}", self.video_map);
        let _ = writeln!(out, "errors.correct={}", self.errors.correct);
        let _ = writeln!(out, "errors.mislocalized={}", self.errors.mislocalized);
        let _ = writeln!(out, "errors.background={}", self.errors.background);
        let _ = writeln!(out, "errors.incorrect={}", self.errors.incorrect);
        let _ = writeln!(out, "errors.analyzed={}", self.errors.analyzed);
        let _ = writeln!(out, "num_detections={}", self.num_detections);
        let _ = writeln!(out, "num_tubes={}", self.num_tubes);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "IoU threshold {}", self.iou_threshold);
        let _ = writeln!(out, "{:<8} {:>9} {:>9}", "class", "frame AP", "video AP");
        for (c, ap) in &self.frame_ap {
            let v = self.video_ap.get(c).copied().flatten();
            let pct = |a: Option<f64>| a.map_or("-".to_string(), |a| format!("{:.1}", 100.0 * a));
            let _ = writeln!(out, "{:<8} {:>9} {:>9}", c, pct(*ap), pct(v));
        }
        let _ = writeln!(
            out,
            "{:<8} {:>9.1} {:>9.1}",
            "mAP",
            100.0 * self.frame_map,
            100.0 * self.video_map
        );
        let e = &self.errors;
        let _ = writeln!(
            out,
            "top-{} detections: correct {:.1}%  mislocalized {:.1}%  background {:.1}%  incorrect {:.1}%",
            e.analyzed,
            100.0 * e.correct,
            100.0 * e.mislocalized,
            100.0 * e.background,
            100.0 * e.incorrect
        );
        out
    }
}

/// Parses `key=value` lines into a map; lines without `=` are skipped.
pub fn parse_key_value(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
