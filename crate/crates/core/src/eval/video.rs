use std::collections::BTreeMap;

use crate::error::Result;
use crate::eval::ap::{average_precision, greedy_match};
use crate::records::{iou_3d, ActionTube, GroundTruthInstance, TubeFrame};

/// Ground-truth tubes: one per (video, instance) run of consecutive frames.
/// A gap in an instance's annotations starts a new tube.
pub fn ground_truth_tubes(ground_truth: &[GroundTruthInstance]) -> Result<Vec<ActionTube>> {
    let mut grouped: BTreeMap<(u32, u32, u32), Vec<&GroundTruthInstance>> = BTreeMap::new();
    for g in ground_truth {
        grouped
            .entry((g.video_id, g.instance_id, g.class_id))
            .or_default()
            .push(g);
    }
    let mut tubes = Vec::new();
    for ((video_id, _, class_id), mut gts) in grouped {
        gts.sort_by_key(|g| g.frame_index);
        let mut run: Vec<TubeFrame> = Vec::new();
        for g in gts {
            if let Some(last) = run.last() {
                if g.frame_index != last.frame_index + 1 {
                    tubes.push(ActionTube::new(video_id, class_id, std::mem::take(&mut run), 1.0)?);
                }
            }
            run.push(TubeFrame {
                frame_index: g.frame_index,
                bbox: g.bbox,
                score: 1.0,
            });
        }
        if !run.is_empty() {
            tubes.push(ActionTube::new(video_id, class_id, run, 1.0)?);
        }
    }
    Ok(tubes)
}

/// Video-level AP of one class: the frame protocol with 3D tube IoU as the
/// overlap and tube scores as confidences. Matching stays within a video.
pub fn video_ap(
    tubes: &[ActionTube],
    gt_tubes: &[ActionTube],
    class_id: u32,
    iou_threshold: f64,
) -> Option<f64> {
    let gts: Vec<&ActionTube> = gt_tubes.iter().filter(|t| t.class_id() == class_id).collect();
    let dets: Vec<&ActionTube> = tubes.iter().filter(|t| t.class_id() == class_id).collect();
    let mut by_video: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_video.entry(g.video_id()).or_default().push(i);
    }
    let flags = greedy_match(
        &dets,
        |t| t.tube_score(),
        |t| by_video.get(&t.video_id()).cloned().unwrap_or_default(),
        &gts,
        |t, g| iou_3d(t, g),
        iou_threshold,
    );
    average_precision(&flags, gts.len())
}
