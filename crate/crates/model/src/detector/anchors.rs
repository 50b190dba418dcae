//! Anchor grids, IoU matching, NMS and minibatch sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tubeshift_core::{iou_2d, BoundingBox};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Anchor side lengths in pixels (square root of the area).
    pub scales: Vec<f64>,
    /// Height / width.
    pub aspect_ratios: Vec<f64>,
    pub rpn_positive_iou: f64,
    pub rpn_negative_iou: f64,
    /// Proposals ranked before NMS.
    pub pre_nms_top: usize,
    /// Proposals kept after NMS.
    pub proposals_kept: usize,
    pub nms_iou: f64,
    /// Anchors sampled per image for the RPN loss.
    pub rpn_batch: usize,
    pub rpn_positive_fraction: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![12.0, 16.0, 20.0],
            aspect_ratios: vec![1.0],
            rpn_positive_iou: 0.7,
            rpn_negative_iou: 0.3,
            pre_nms_top: 96,
            proposals_kept: 16,
            nms_iou: 0.7,
            rpn_batch: 64,
            rpn_positive_fraction: 0.5,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return bad("anchor scales and aspect ratios must be non-empty");
        }
        if self.scales.iter().chain(&self.aspect_ratios).any(|v| !v.is_finite() || *v <= 0.0) {
            return bad("anchor scales and aspect ratios must be positive");
        }
        if !(0.0 <= self.rpn_negative_iou
            && self.rpn_negative_iou < self.rpn_positive_iou
            && self.rpn_positive_iou <= 1.0)
        {
            return bad("need 0 <= rpn_negative_iou < rpn_positive_iou <= 1");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.rpn_positive_fraction) {
            return bad("nms_iou and rpn_positive_fraction must lie in [0, 1]");
        }
        if self.proposals_kept == 0 || self.pre_nms_top == 0 || self.rpn_batch == 0 {
            return bad("proposal and sampling counts must be positive");
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// Anchors for a `grid` feature map, ordered (row, column, anchor) to match
/// the RPN output layout.
pub fn generate_anchors(config: &AnchorConfig, grid: (usize, usize), stride: usize) -> Result<Vec<BoundingBox>> {
    let mut shapes = Vec::with_capacity(config.num_anchors());
    for &s in &config.scales {
        for &r in &config.aspect_ratios {
            shapes.push((s / r.sqrt(), s * r.sqrt()));
        }
    }
    let mut out = Vec::with_capacity(grid.0 * grid.1 * shapes.len());
    for y in 0..grid.0 {
        for x in 0..grid.1 {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for &(w, h) in &shapes {
                out.push(BoundingBox::from_center(cx, cy, w, h)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to ground-truth index.
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU matching: positive at or above `positive`, negative below `negative`,
/// and every ground truth also claims its highest-overlap anchors.
pub fn match_anchors(anchors: &[BoundingBox], gts: &[BoundingBox], positive: f64, negative: f64) -> Vec<AnchorLabel> {
    if gts.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou_2d(a, g)).collect()).collect();
    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|row| {
            let (best, iou) = argmax(row);
            if iou >= positive {
                AnchorLabel::Positive(best)
            } else if iou < negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for g in 0..gts.len() {
        let best = ious.iter().map(|row| row[g]).fold(0.0f64, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (a, row) in ious.iter().enumerate() {
            if row[g] == best {
                labels[a] = AnchorLabel::Positive(g);
            }
        }
    }
    labels
}

/// First index of the maximum value.
pub(crate) fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best })
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; ties keep the earlier index first.
pub fn nms(boxes: &[BoundingBox], scores: &[f64], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() == max_keep {
            break;
        }
        if keep.iter().all(|&k| iou_2d(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Samples up to `batch` indices with at most `positive_fraction` of them from
/// `positives`; the rest come from `negatives`. Both outputs are sorted.
pub fn sample_balanced<R: Rng>(
    positives: &[usize],
    negatives: &[usize],
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let max_pos = (batch as f64 * positive_fraction).floor() as usize;
    let pos = choose(positives, max_pos, rng);
    let neg = choose(negatives, batch - pos.len(), rng);
    (pos, neg)
}

fn choose<R: Rng>(from: &[usize], amount: usize, rng: &mut R) -> Vec<usize> {
    if amount >= from.len() {
        return from.to_vec();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, from.len(), amount)
        .into_iter()
        .map(|i| from[i])
        .collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn anchor_layout() {
        let cfg = AnchorConfig::default();
        let a = generate_anchors(&cfg, (2, 3), 8).unwrap();
        assert_eq!(a.len(), 2 * 3 * 3);
        // row 1, column 2, second scale
        let b = a[(3 + 2) * 3 + 1];
        assert_eq!(b.center(), (20.0, 12.0));
        assert!((b.width() - 16.0).abs() < 1e-12 && (b.height() - 16.0).abs() < 1e-12);
        let tall = AnchorConfig { aspect_ratios: vec![4.0], ..cfg };
        let t = generate_anchors(&tall, (1, 1), 8).unwrap()[0];
        assert!((t.height() / t.width() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn matching_rules() {
        let anchors = [bx(0., 0., 10., 10.), bx(1., 0., 11., 10.), bx(5., 0., 15., 10.), bx(40., 40., 50., 50.)];
        let gts = [bx(0., 0., 10., 10.)];
        let l = match_anchors(&anchors, &gts, 0.7, 0.3);
        assert_eq!(l[0], AnchorLabel::Positive(0));
        assert_eq!(l[1], AnchorLabel::Positive(0)); // IoU 9/11
        assert_eq!(l[2], AnchorLabel::Ignore); // IoU 1/3
        assert_eq!(l[3], AnchorLabel::Negative);
        // low-overlap GT still claims its best anchor
        let far = [bx(38., 38., 60., 60.)];
        let l = match_anchors(&anchors, &far, 0.7, 0.3);
        assert_eq!(l[3], AnchorLabel::Positive(0));
        assert!(match_anchors(&anchors, &[], 0.7, 0.3).iter().all(|&x| x == AnchorLabel::Negative));
    }

    #[test]
    fn nms_contract() {
        let boxes = [bx(0., 0., 10., 10.), bx(1., 1., 11., 11.), bx(20., 20., 30., 30.), bx(0., 0., 10., 9.)];
        let scores = [0.5, 0.9, 0.3, 0.8];
        let keep = nms(&boxes, &scores, 0.5, 10);
        assert_eq!(keep, vec![1, 2]);
        for (i, &a) in keep.iter().enumerate() {
            for &b in &keep[i + 1..] {
                assert!(iou_2d(&boxes[a], &boxes[b]) <= 0.5);
            }
        }
        assert_eq!(nms(&boxes, &scores, 0.5, 1), vec![1]);
        assert!(nms(&[], &[], 0.5, 3).is_empty());
    }

    #[test]
    fn balanced_sampling() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let pos: Vec<usize> = (0..50).collect();
        let neg: Vec<usize> = (50..500).collect();
        let (p, n) = sample_balanced(&pos, &neg, 64, 0.5, &mut rng);
        assert_eq!((p.len(), n.len()), (32, 32));
        let (p, n) = sample_balanced(&pos[..3], &neg, 64, 0.5, &mut rng);
        assert_eq!((p.len(), n.len()), (3, 61));
        assert!(n.windows(2).all(|w| w[0] < w[1]));
    }
}
