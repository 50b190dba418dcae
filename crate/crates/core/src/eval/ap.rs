//! All-point interpolated average precision and greedy VOC matching.

use std::collections::HashMap;

use crate::geometry::iou_2d;
use crate::records::{Detection, GroundTruthInstance};

/// Area under the precision envelope for detections already labeled TP/FP.
///
/// `ranked` must be in descending score order. Returns `None` when there is
/// no ground truth to recall.
pub fn average_precision(ranked: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // monotone envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

/// Indices of `scores` in descending order; ties keep input order.
pub(crate) fn rank_by_score(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching: each detection, highest score first, claims its best
/// overlapping ground truth if the overlap reaches `iou_threshold` and that
/// ground truth is still unclaimed. Returns TP flags in ranked order.
pub(crate) fn greedy_match<D, G>(
    dets: &[D],
    score: impl Fn(&D) -> f64,
    candidates: impl Fn(&D) -> Vec<usize>,
    gts: &[G],
    overlap: impl Fn(&D, &G) -> f64,
    iou_threshold: f64,
) -> Vec<bool> {
    let order = rank_by_score(dets.iter().map(&score));
    let mut claimed = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let det = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for g in candidates(det) {
                let o = overlap(det, &gts[g]);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, o)) if o >= iou_threshold && !claimed[g] => {
                    claimed[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Frame-level AP of one class under the VOC protocol.
///
/// `None` when the class has no ground-truth instance.
pub fn frame_ap(
    detections: &[Detection],
    ground_truth: &[GroundTruthInstance],
    class_id: u32,
    iou_threshold: f64,
) -> Option<f64> {
    let gts: Vec<&GroundTruthInstance> = ground_truth
        .iter()
        .filter(|g| g.class_id == class_id)
        .collect();
    let dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.class_id == class_id)
        .collect();
    let mut by_frame: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_frame.entry((g.video_id, g.frame_index)).or_default().push(i);
    }
    let flags = greedy_match(
        &dets,
        |d| d.score,
        |d| {
            by_frame
                .get(&(d.video_id, d.frame_index))
                .cloned()
                .unwrap_or_default()
        },
        &gts,
        |d, g| iou_2d(&d.bbox, &g.bbox),
        iou_threshold,
    );
    average_precision(&flags, gts.len())
}

/// Mean over the classes that have ground truth. Classes without ground truth
/// are skipped with a warning.
pub fn mean_ap(per_class: &[(u32, Option<f64>)]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (class_id, ap) in per_class {
        match ap {
            Some(ap) => {
                sum += ap;
                n += 1;
            }
            None => log::warn!("class {class_id} has no ground truth; excluded from mAP"),
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(frame: u32, b: [f64; 4], score: f64) -> Detection {
        Detection::new(0, frame, BoundingBox::try_from(b).unwrap(), 0, score).unwrap()
    }

    fn gt(frame: u32, b: [f64; 4]) -> GroundTruthInstance {
        GroundTruthInstance {
            video_id: 0,
            frame_index: frame,
            bbox: BoundingBox::try_from(b).unwrap(),
            class_id: 0,
            instance_id: 0,
        }
    }

    #[test]
    fn perfect_single_match() {
        let b = [0.0, 0.0, 10.0, 10.0];
        assert_eq!(frame_ap(&[det(0, b, 0.9)], &[gt(0, b)], 0, 0.5), Some(1.0));
    }

    #[test]
    fn staircase_tp_fp_tp() {
        // 0.5 * 1 + 0.5 * 2/3
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_is_undefined() {
        assert_eq!(average_precision(&[false], 0), None);
        assert_eq!(frame_ap(&[], &[], 3, 0.5), None);
        assert_eq!(mean_ap(&[(0, None), (1, Some(0.5))]), 0.5);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let flags = {
            let dets = [det(0, b, 0.9), det(0, b, 0.8)];
            let gts = [gt(0, b)];
            greedy_match(
                &dets,
                |d| d.score,
                |_| vec![0],
                &gts,
                |d, g| iou_2d(&d.bbox, &g.bbox),
                0.5,
            )
        };
        assert_eq!(flags, vec![true, false]);
    }

    /// Independent reference: brute-force greedy matching followed by the
    /// direct staircase sum `sum over TP ranks of (1/G) * max precision at or
    /// after that rank`.
    fn brute_force_ap(dets: &[Detection], gts: &[GroundTruthInstance], thr: f64) -> f64 {
        let mut ranked: Vec<&Detection> = dets.iter().collect();
        ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut used = vec![false; gts.len()];
        let mut tp = Vec::new();
        for d in &ranked {
            let mut best = -1.0;
            let mut best_g = None;
            for (gi, g) in gts.iter().enumerate() {
                if g.frame_index != d.frame_index {
                    continue;
                }
                let o = iou_2d(&d.bbox, &g.bbox);
                if o > best {
                    best = o;
                    best_g = Some(gi);
                }
            }
            let hit = matches!(best_g, Some(gi) if best >= thr && !used[gi]);
            if hit {
                used[best_g.unwrap()] = true;
            }
            tp.push(hit);
        }
        let n = tp.len();
        let precision_at = |k: usize| tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64;
        (0..n)
            .filter(|&k| tp[k])
            .map(|k| (k..n).map(precision_at).fold(0.0, f64::max) / gts.len() as f64)
            .sum()
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rand_box = |rng: &mut ChaCha8Rng| {
            let x = rng.random_range(0.0..20.0);
            let y = rng.random_range(0.0..20.0);
            let s = rng.random_range(4.0..12.0);
            [x, y, x + s, y + s]
        };
        for _ in 0..500 {
            let n_gt = rng.random_range(1..=3);
            let n_det = rng.random_range(0..=6);
            let gts: Vec<_> = (0..n_gt)
                .map(|_| gt(rng.random_range(0..2), rand_box(&mut rng)))
                .collect();
            let dets: Vec<_> = (0..n_det)
                .map(|_| det(rng.random_range(0..2), rand_box(&mut rng), rng.random_range(0.0..1.0)))
                .collect();
            let ap = frame_ap(&dets, &gts, 0, 0.5).unwrap();
            let reference = brute_force_ap(&dets, &gts, 0.5);
            assert!((ap - reference).abs() < 1e-12, "{ap} vs {reference}");
        }
    }

    #[test]
    fn monotone_under_extra_detections() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(1..8);
            let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let g = flags.iter().filter(|&&f| f).count() + rng.random_range(0..3);
            if g == 0 {
                continue;
            }
            let base = average_precision(&flags, g).unwrap();
            let mut low_fp = flags.clone();
            low_fp.push(false);
            assert!(average_precision(&low_fp, g).unwrap() <= base);
            let mut high_tp = vec![true];
            high_tp.extend(&flags);
            assert!(average_precision(&high_tp, g + 1).unwrap() >= base - 1e-12);
        }
    }
}
