//! Dynamic-programming tube linking over per-frame detections of one class.
//!
//! A path picks one box per frame over the whole frame range. Its value is
//! accumulated left to right as `score(b_0)`, then for every step
//! `+ alpha * iou(b_{t-1}, b_t)` followed by `+ score(b_t)`. The DP uses the same
//! accumulation order so its optimum is bit-identical to an exhaustive search.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::geometry::{iou_2d, BoundingBox};
use crate::records::{ActionTube, Detection, TubeFrame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Value of `path` (one index per frame) under the linking objective.
pub fn path_value(frames: &[Vec<ScoredBox>], path: &[usize], alpha: f64) -> f64 {
    let mut value = frames[0][path[0]].score;
    for t in 1..frames.len() {
        let prev = &frames[t - 1][path[t - 1]];
        let cur = &frames[t][path[t]];
        value += alpha * iou_2d(&prev.bbox, &cur.bbox);
        value += cur.score;
    }
    value
}

/// Highest-value path covering every frame, or `None` if some frame is empty.
/// Ties resolve to the lowest box index.
pub fn best_path(frames: &[Vec<ScoredBox>], alpha: f64) -> Option<(Vec<usize>, f64)> {
    if frames.is_empty() || frames.iter().any(Vec::is_empty) {
        return None;
    }
    let mut value: Vec<f64> = frames[0].iter().map(|b| b.score).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(frames.len());
    back.push(Vec::new());
    for t in 1..frames.len() {
        let mut next = Vec::with_capacity(frames[t].len());
        let mut arg = Vec::with_capacity(frames[t].len());
        for cur in &frames[t] {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for (i, prev) in frames[t - 1].iter().enumerate() {
                let v = value[i] + alpha * iou_2d(&prev.bbox, &cur.bbox);
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            next.push(best + cur.score);
            arg.push(best_i);
        }
        value = next;
        back.push(arg);
    }
    let (mut j, best) = value
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let mut path = vec![0; frames.len()];
    for t in (0..frames.len()).rev() {
        path[t] = j;
        if t > 0 {
            j = back[t][j];
        }
    }
    Some((path, best))
}

/// Repeatedly extracts the best full-coverage path and removes its boxes
/// until some frame runs out. `start_frame` is the index of `frames[0]`.
pub fn link_tubes(
    video_id: u32,
    class_id: u32,
    start_frame: u32,
    frames: &[Vec<ScoredBox>],
    alpha: f64,
) -> Result<Vec<ActionTube>> {
    let mut remaining: Vec<Vec<ScoredBox>> = frames.to_vec();
    let mut tubes = Vec::new();
    while let Some((path, _)) = best_path(&remaining, alpha) {
        let tube_frames: Vec<TubeFrame> = path
            .iter()
            .enumerate()
            .map(|(t, &i)| TubeFrame {
                frame_index: start_frame + t as u32,
                bbox: remaining[t][i].bbox,
                score: remaining[t][i].score,
            })
            .collect();
        tubes.push(ActionTube::with_mean_score(video_id, class_id, tube_frames)?);
        for (t, &i) in path.iter().enumerate() {
            remaining[t].remove(i);
        }
    }
    Ok(tubes)
}

/// Links a flat detection list into tubes per (video, class). Each video spans
/// frames `0..num_frames[video]`; a class with no detection on some frame of a
/// video yields no tube there.
pub fn link_detections(
    detections: &[Detection],
    num_frames: &BTreeMap<u32, u32>,
    alpha: f64,
) -> Result<Vec<ActionTube>> {
    let mut grouped: BTreeMap<(u32, u32), Vec<Vec<ScoredBox>>> = BTreeMap::new();
    for d in detections {
        let Some(&n) = num_frames.get(&d.video_id) else {
            continue;
        };
        if d.frame_index >= n {
            continue;
        }
        let frames = grouped
            .entry((d.video_id, d.class_id))
            .or_insert_with(|| vec![Vec::new(); n as usize]);
        frames[d.frame_index as usize].push(ScoredBox {
            bbox: d.bbox,
            score: d.score,
        });
    }
    let mut tubes = Vec::new();
    for ((video_id, class_id), frames) in grouped {
        tubes.extend(link_tubes(video_id, class_id, 0, &frames, alpha)?);
    }
    Ok(tubes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sb(b: [f64; 4], score: f64) -> ScoredBox {
        ScoredBox {
            bbox: BoundingBox::try_from(b).unwrap(),
            score,
        }
    }

    /// Exhaustive maximum over every combination of one box per frame.
    fn exhaustive_best(frames: &[Vec<ScoredBox>], alpha: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        let mut path = vec![0usize; frames.len()];
        loop {
            best = best.max(path_value(frames, &path, alpha));
            let mut t = 0;
            loop {
                if t == frames.len() {
                    return best;
                }
                path[t] += 1;
                if path[t] < frames[t].len() {
                    break;
                }
                path[t] = 0;
                t += 1;
            }
        }
    }

    #[test]
    fn one_box_per_frame_gives_single_tube() {
        let frames: Vec<_> = (0..5)
            .map(|t| vec![sb([t as f64, 0.0, t as f64 + 10.0, 10.0], 0.5)])
            .collect();
        let tubes = link_tubes(3, 1, 10, &frames, 1.0).unwrap();
        assert_eq!(tubes.len(), 1);
        assert_eq!(tubes[0].len(), 5);
        assert_eq!(tubes[0].start_frame(), 10);
        assert_eq!(tubes[0].tube_score(), 0.5);
    }

    #[test]
    fn two_frame_example_picks_a_then_c() {
        // IoU(a, c) = 0.9 with a = [0,0,10,10], c = [0,0,10,9]
        let a = sb([0.0, 0.0, 10.0, 10.0], 0.9);
        let b = sb([30.0, 30.0, 40.0, 40.0], 0.2);
        let c = sb([0.0, 0.0, 10.0, 9.0], 0.8);
        let d = sb([50.0, 0.0, 60.0, 10.0], 0.1);
        assert!((iou_2d(&a.bbox, &c.bbox) - 0.9).abs() < 1e-12);
        let frames = vec![vec![a, b], vec![c, d]];
        let (path, value) = best_path(&frames, 1.0).unwrap();
        assert_eq!(path, vec![0, 0]);
        assert_eq!(value, exhaustive_best(&frames, 1.0));
        let tubes = link_tubes(0, 0, 0, &frames, 1.0).unwrap();
        assert_eq!(tubes.len(), 2);
        assert_eq!(tubes[0].frames()[0].bbox, a.bbox);
        assert_eq!(tubes[0].frames()[1].bbox, c.bbox);
    }

    #[test]
    fn empty_input_or_empty_frame() {
        assert!(link_tubes(0, 0, 0, &[], 1.0).unwrap().is_empty());
        let frames = vec![vec![sb([0.0, 0.0, 1.0, 1.0], 0.5)], vec![]];
        assert!(link_tubes(0, 0, 0, &frames, 1.0).unwrap().is_empty());
    }

    #[test]
    fn dp_equals_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..1000 {
            let n_frames = rng.random_range(1..=4);
            let alpha = rng.random_range(0.0..2.0);
            let frames: Vec<Vec<ScoredBox>> = (0..n_frames)
                .map(|_| {
                    (0..rng.random_range(1..=3))
                        .map(|_| {
                            let x = rng.random_range(0.0..20.0);
                            let y = rng.random_range(0.0..20.0);
                            let s = rng.random_range(3.0..15.0);
                            sb([x, y, x + s, y + s], rng.random_range(0.0..1.0))
                        })
                        .collect()
                })
                .collect();
            let (path, value) = best_path(&frames, alpha).unwrap();
            assert_eq!(value, exhaustive_best(&frames, alpha));
            assert_eq!(value, path_value(&frames, &path, alpha));
            for tube in link_tubes(0, 0, 0, &frames, alpha).unwrap() {
                assert_eq!(tube.len(), n_frames);
            }
        }
    }

    #[test]
    fn link_detections_groups_by_video_and_class() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let mut dets = Vec::new();
        for f in 0..3 {
            dets.push(Detection::new(0, f, b, 0, 0.9).unwrap());
            dets.push(Detection::new(1, f, b, 2, 0.4).unwrap());
        }
        // class 1 misses frame 2 of video 0: no tube
        dets.push(Detection::new(0, 0, b, 1, 0.4).unwrap());
        let frames = BTreeMap::from([(0, 3), (1, 3)]);
        let tubes = link_detections(&dets, &frames, 1.0).unwrap();
        assert_eq!(tubes.len(), 2);
        assert!(tubes.iter().all(|t| t.len() == 3));
    }
}
