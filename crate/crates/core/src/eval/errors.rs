//! Four-way breakdown of the top-ranked detections.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::eval::ap::rank_by_score;
use crate::geometry::iou_2d;
use crate::records::{Detection, GroundTruthInstance};

pub const CORRECT_IOU: f64 = 0.5;
pub const MISLOCALIZED_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    /// Right class, overlap in `[0.5, 1]`.
    Correct,
    /// Right class, overlap in `[0.3, 0.5)`.
    Mislocalized,
    /// Overlap in `[0, 0.3)`, or no ground truth on the frame.
    Background,
    /// Class differs from the best-overlapping ground truth.
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub correct: f64,
    pub mislocalized: f64,
    pub background: f64,
    pub incorrect: f64,
    /// Number of detections the fractions are taken over.
    pub analyzed: usize,
}

impl ErrorBreakdown {
    pub fn total(&self) -> f64 {
        self.correct + self.mislocalized + self.background + self.incorrect
    }
}

/// Classifies one detection against the ground truth of its frame.
///
/// The class check comes first, against the ground truth with the largest
/// positive overlap; a detection touching no ground truth is background.
pub fn classify_detection(det: &Detection, frame_gts: &[&GroundTruthInstance]) -> ErrorKind {
    let mut best: Option<(&GroundTruthInstance, f64)> = None;
    for g in frame_gts {
        let o = iou_2d(&det.bbox, &g.bbox);
        if o > 0.0 && best.is_none_or(|(_, b)| o > b) {
            best = Some((g, o));
        }
    }
    match best {
        None => ErrorKind::Background,
        Some((g, _)) if g.class_id != det.class_id => ErrorKind::Incorrect,
        Some((_, o)) if o >= CORRECT_IOU => ErrorKind::Correct,
        Some((_, o)) if o >= MISLOCALIZED_IOU => ErrorKind::Mislocalized,
        Some(_) => ErrorKind::Background,
    }
}

/// Breakdown over the `top_k` highest-scoring detections.
pub fn error_analysis(
    detections: &[Detection],
    ground_truth: &[GroundTruthInstance],
    top_k: usize,
) -> ErrorBreakdown {
    let mut by_frame: HashMap<(u32, u32), Vec<&GroundTruthInstance>> = HashMap::new();
    for g in ground_truth {
        by_frame.entry((g.video_id, g.frame_index)).or_default().push(g);
    }
    let order = rank_by_score(detections.iter().map(|d| d.score));
    let mut counts = [0usize; 4];
    let mut n = 0usize;
    for &i in order.iter().take(top_k) {
        let d = &detections[i];
        let gts = by_frame
            .get(&(d.video_id, d.frame_index))
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let slot = match classify_detection(d, gts) {
            ErrorKind::Correct => 0,
            ErrorKind::Mislocalized => 1,
            ErrorKind::Background => 2,
            ErrorKind::Incorrect => 3,
        };
        counts[slot] += 1;
        n += 1;
    }
    if n == 0 {
        return ErrorBreakdown::default();
    }
    let frac = |c: usize| c as f64 / n as f64;
    ErrorBreakdown {
        correct: frac(counts[0]),
        mislocalized: frac(counts[1]),
        background: frac(counts[2]),
        incorrect: frac(counts[3]),
        analyzed: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use rand::{Rng, SeedableRng};

    fn gt(class_id: u32) -> GroundTruthInstance {
        GroundTruthInstance {
            video_id: 0,
            frame_index: 0,
            bbox: BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            class_id,
            instance_id: 0,
        }
    }

    /// Box `[0, 0, 10, w]` overlaps the `10x10` ground truth with IoU `w / 10`.
    fn det_with_iou(iou: f64, class_id: u32) -> Detection {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0 * iou).unwrap();
        Detection::new(0, 0, b, class_id, 0.9).unwrap()
    }

    #[test]
    fn buckets() {
        let g = gt(2);
        let gts = [&g];
        assert_eq!(classify_detection(&det_with_iou(1.0, 2), &gts), ErrorKind::Correct);
        assert_eq!(classify_detection(&det_with_iou(0.4, 2), &gts), ErrorKind::Mislocalized);
        assert_eq!(classify_detection(&det_with_iou(0.2, 2), &gts), ErrorKind::Background);
        assert_eq!(classify_detection(&det_with_iou(0.6, 1), &gts), ErrorKind::Incorrect);
        assert_eq!(classify_detection(&det_with_iou(0.5, 2), &gts), ErrorKind::Correct);
        assert_eq!(classify_detection(&det_with_iou(0.3, 2), &gts), ErrorKind::Mislocalized);
    }

    #[test]
    fn no_ground_truth_is_background() {
        assert_eq!(classify_detection(&det_with_iou(1.0, 2), &[]), ErrorKind::Background);
        let far = Detection::new(0, 0, BoundingBox::new(50.0, 50.0, 60.0, 60.0).unwrap(), 1, 0.5).unwrap();
        let g = gt(2);
        assert_eq!(classify_detection(&far, &[&g]), ErrorKind::Background);
    }

    #[test]
    fn top_k_and_fractions_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let gts: Vec<_> = (0..20)
            .map(|f| GroundTruthInstance { frame_index: f, ..gt(f % 3) })
            .collect();
        for _ in 0..100 {
            let dets: Vec<_> = (0..rng.random_range(1..60))
                .map(|_| {
                    let x = rng.random_range(-5.0..15.0);
                    let b = BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
                    Detection::new(0, rng.random_range(0..25), b, rng.random_range(0..3), rng.random_range(0.0..1.0))
                        .unwrap()
                })
                .collect();
            let k = rng.random_range(1..80);
            let e = error_analysis(&dets, &gts, k);
            assert_eq!(e.analyzed, k.min(dets.len()));
            assert!((e.total() - 1.0).abs() <= 1e-9);
            for v in [e.correct, e.mislocalized, e.background, e.incorrect] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert_eq!(error_analysis(&[], &gts, 10).analyzed, 0);
    }
}
