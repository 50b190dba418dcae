//! Second stage: ROI sampling, classification and per-class box regression.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tubeshift_core::{encode_box_delta, iou_2d, BoundingBox};

use super::anchors::{argmax, sample_balanced};
use super::losses::{cross_entropy, smooth_l1, zero_scalar};
use crate::error::{ModelError, Result};
use crate::params::{Init, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// ROIs sampled per image for the classification loss.
    pub rois_per_image: usize,
    pub foreground_fraction: f64,
    pub foreground_iou: f64,
    /// Scale applied to regression targets `(dx, dy, dw, dh)`.
    pub box_weights: [f64; 4],
    /// Ground-truth boxes join the proposals during training.
    pub add_gt_to_proposals: bool,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            rois_per_image: 16,
            foreground_fraction: 0.25,
            foreground_iou: 0.5,
            box_weights: [10.0, 10.0, 5.0, 5.0],
            add_gt_to_proposals: true,
            score_threshold: 0.001,
            nms_iou: 0.3,
            max_detections: 20,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.rois_per_image == 0 || self.max_detections == 0 {
            return Err(ModelError::Config("rois_per_image and max_detections must be positive".into()));
        }
        if !unit(self.foreground_fraction) || !unit(self.foreground_iou) || !unit(self.nms_iou) || !unit(self.score_threshold) {
            return Err(ModelError::Config("head fractions and thresholds must lie in [0, 1]".into()));
        }
        if self.box_weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(ModelError::Config("box_weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BoxHead {
    cls: Linear,
    reg: Linear,
    num_classes: usize,
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, in_features: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            cls: Linear::new(store, "head.cls", in_features, num_classes + 1, Init::Normal(0.01))?,
            reg: Linear::new(store, "head.reg", in_features, 4 * num_classes, Init::Normal(0.001))?,
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[K, D] -> (logits [K, C + 1], deltas [K, 4 C])`; column 0 of the
    /// logits is background.
    pub fn classify_and_regress(&self, tf2_vectors: &Tensor) -> Result<(Tensor, Tensor)> {
        let (k, _) = tf2_vectors.dims2()?;
        if k == 0 {
            let dev = tf2_vectors.device();
            return Ok((
                Tensor::zeros((0, self.num_classes + 1), candle_core::DType::F32, dev)?,
                Tensor::zeros((0, 4 * self.num_classes), candle_core::DType::F32, dev)?,
            ));
        }
        Ok((self.cls.forward(tf2_vectors)?, self.reg.forward(tf2_vectors)?))
    }
}

/// Training targets for the sampled ROIs of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTargets {
    pub rois: Vec<BoundingBox>,
    /// 0 for background, `class + 1` otherwise.
    pub labels: Vec<u32>,
    /// Weighted deltas toward the matched ground truth; zeros for background.
    pub deltas: Vec<[f64; 4]>,
}

/// Labels proposals against `(box, class)` ground truth and samples a
/// foreground/background minibatch.
pub fn sample_rois<R: Rng>(
    proposals: &[BoundingBox],
    gts: &[(BoundingBox, u32)],
    config: &HeadConfig,
    rng: &mut R,
) -> RoiTargets {
    let mut candidates: Vec<BoundingBox> = proposals.to_vec();
    if config.add_gt_to_proposals {
        candidates.extend(gts.iter().map(|g| g.0));
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut matched = vec![None; candidates.len()];
    for (i, c) in candidates.iter().enumerate() {
        let ious: Vec<f64> = gts.iter().map(|g| iou_2d(c, &g.0)).collect();
        let (best, iou) = if ious.is_empty() { (0, 0.0) } else { argmax(&ious) };
        if iou >= config.foreground_iou {
            fg.push(i);
            matched[i] = Some(best);
        } else {
            bg.push(i);
        }
    }
    let (fg, bg) = sample_balanced(&fg, &bg, config.rois_per_image, config.foreground_fraction, rng);
    let mut out = RoiTargets {
        rois: Vec::new(),
        labels: Vec::new(),
        deltas: Vec::new(),
    };
    for i in fg {
        let g = matched[i].expect("foreground ROI has a match");
        let d = encode_box_delta(&candidates[i], &gts[g].0);
        out.rois.push(candidates[i]);
        out.labels.push(gts[g].1 + 1);
        out.deltas.push(std::array::from_fn(|k| d[k] * config.box_weights[k]));
    }
    for i in bg {
        out.rois.push(candidates[i]);
        out.labels.push(0);
        out.deltas.push([0.0; 4]);
    }
    out
}

/// `(l_cls, l_reg)`: mean cross-entropy over all ROIs, and smooth-L1 on the
/// ground-truth class deltas of foreground ROIs normalized by the ROI count.
pub fn detection_loss(logits: &Tensor, deltas: &Tensor, labels: &[u32], targets: &[[f64; 4]]) -> Result<(Tensor, Tensor)> {
    let (k, width) = deltas.dims2()?;
    if labels.len() != k || targets.len() != k {
        return Err(ModelError::Shape(format!(
            "{k} ROIs but {} labels and {} targets",
            labels.len(),
            targets.len()
        )));
    }
    let dev = logits.device();
    let l_cls = cross_entropy(logits, labels)?;
    if labels.iter().all(|&l| l == 0) {
        return Ok((l_cls, zero_scalar(dev)?));
    }
    let mut mask = vec![0f32; k * width];
    let mut target = vec![0f32; k * width];
    for (i, (&l, t)) in labels.iter().zip(targets).enumerate() {
        if l == 0 {
            continue;
        }
        let base = i * width + 4 * (l as usize - 1);
        for j in 0..4 {
            mask[base + j] = 1.0;
            target[base + j] = t[j] as f32;
        }
    }
    let mask = Tensor::from_vec(mask, (k, width), dev)?;
    let target = Tensor::from_vec(target, (k, width), dev)?;
    let per = smooth_l1(&(deltas - target)?, 1.0)?;
    let l_reg = ((per * mask)?.sum_all()? / k as f64)?;
    Ok((l_cls, l_reg))
}
