use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_2d, BoundingBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: u32,
    pub frame_index: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub score: f64,
}

impl Detection {
    pub fn new(
        video_id: u32,
        frame_index: u32,
        bbox: BoundingBox,
        class_id: u32,
        score: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidDetection(format!(
                "score {score} outside [0, 1]"
            )));
        }
        Ok(Self {
            video_id,
            frame_index,
            bbox,
            class_id,
            score,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub video_id: u32,
    pub frame_index: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: u32,
    /// Links the same actor across frames of one video.
    pub instance_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeFrame {
    pub frame_index: u32,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Temporally contiguous sequence of per-frame boxes for one actor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTube {
    video_id: u32,
    class_id: u32,
    frames: Vec<TubeFrame>,
    tube_score: f64,
}

impl ActionTube {
    pub fn new(
        video_id: u32,
        class_id: u32,
        frames: Vec<TubeFrame>,
        tube_score: f64,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidTube("empty tube".into()));
        }
        for pair in frames.windows(2) {
            if pair[1].frame_index != pair[0].frame_index + 1 {
                return Err(Error::InvalidTube(format!(
                    "gap between frames {} and {}",
                    pair[0].frame_index, pair[1].frame_index
                )));
            }
        }
        if !tube_score.is_finite() {
            return Err(Error::InvalidTube("non-finite tube score".into()));
        }
        Ok(Self {
            video_id,
            class_id,
            frames,
            tube_score,
        })
    }

    /// A tube scored by the mean of its per-frame scores.
    pub fn with_mean_score(video_id: u32, class_id: u32, frames: Vec<TubeFrame>) -> Result<Self> {
        let mean = frames.iter().map(|f| f.score).sum::<f64>() / frames.len().max(1) as f64;
        Self::new(video_id, class_id, frames, mean)
    }

    pub fn video_id(&self) -> u32 {
        self.video_id
    }
    pub fn class_id(&self) -> u32 {
        self.class_id
    }
    pub fn frames(&self) -> &[TubeFrame] {
        &self.frames
    }
    pub fn tube_score(&self) -> f64 {
        self.tube_score
    }

    pub fn start_frame(&self) -> u32 {
        self.frames[0].frame_index
    }

    /// Inclusive last frame.
    pub fn end_frame(&self) -> u32 {
        self.frames[self.frames.len() - 1].frame_index
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn box_at(&self, frame_index: u32) -> Option<&BoundingBox> {
        let offset = frame_index.checked_sub(self.start_frame())? as usize;
        self.frames.get(offset).map(|f| &f.bbox)
    }
}

/// Temporal IoU of the frame spans times the mean per-frame IoU over the
/// shared frames. Class agreement is left to the caller.
pub fn iou_3d(a: &ActionTube, b: &ActionTube) -> f64 {
    let start = a.start_frame().max(b.start_frame());
    let end = a.end_frame().min(b.end_frame());
    if start > end {
        return 0.0;
    }
    let overlap = (end - start + 1) as f64;
    let union = (a.end_frame().max(b.end_frame()) - a.start_frame().min(b.start_frame()) + 1) as f64;
    let spatial: f64 = (start..=end)
        .map(|f| {
            // both lookups succeed inside the shared span
            iou_2d(a.box_at(f).unwrap(), b.box_at(f).unwrap())
        })
        .sum();
    (overlap / union) * (spatial / overlap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tube(start: u32, boxes: &[[f64; 4]]) -> ActionTube {
        let frames = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| TubeFrame {
                frame_index: start + i as u32,
                bbox: BoundingBox::try_from(*b).unwrap(),
                score: 0.5,
            })
            .collect();
        ActionTube::with_mean_score(0, 0, frames).unwrap()
    }

    #[test]
    fn tube_rejects_gaps_and_empty() {
        assert!(ActionTube::new(0, 0, vec![], 0.0).is_err());
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let frames = vec![
            TubeFrame { frame_index: 1, bbox: b, score: 1.0 },
            TubeFrame { frame_index: 3, bbox: b, score: 1.0 },
        ];
        assert!(ActionTube::new(0, 0, frames, 1.0).is_err());
    }

    #[test]
    fn detection_score_range() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(Detection::new(0, 0, b, 0, 1.5).is_err());
        assert!(Detection::new(0, 0, b, 0, 1.0).is_ok());
    }

    #[test]
    fn iou_3d_examples() {
        let sq = [0.0, 0.0, 10.0, 10.0];
        let t = tube(1, &[sq; 4]);
        assert_eq!(iou_3d(&t, &t), 1.0);
        assert_eq!(iou_3d(&t, &tube(10, &[sq; 2])), 0.0);
        // frames 1-4 vs 3-6, identical boxes on 3-4: (2/6) * 1
        let u = tube(3, &[sq; 4]);
        assert!((iou_3d(&t, &u) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_3d_zero_when_spatially_disjoint() {
        let a = tube(0, &[[0.0, 0.0, 10.0, 10.0]; 3]);
        let b = tube(0, &[[20.0, 20.0, 30.0, 30.0]; 3]);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    proptest! {
        #[test]
        fn iou_3d_bounded(
            s1 in 0u32..6, s2 in 0u32..6,
            b1 in proptest::collection::vec((0.0..20.0f64, 0.0..20.0f64, 1.0..20.0f64), 1..6),
            b2 in proptest::collection::vec((0.0..20.0f64, 0.0..20.0f64, 1.0..20.0f64), 1..6),
        ) {
            let mk = |v: &Vec<(f64, f64, f64)>| v.iter().map(|&(x, y, s)| [x, y, x + s, y + s]).collect::<Vec<_>>();
            let a = tube(s1, &mk(&b1));
            let b = tube(s2, &mk(&b2));
            let v = iou_3d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou_3d(&b, &a));
            let disjoint = a.end_frame() < b.start_frame() || b.end_frame() < a.start_frame();
            if disjoint {
                prop_assert_eq!(v, 0.0);
            }
        }
    }
}
