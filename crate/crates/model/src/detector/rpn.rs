//! Region proposal network on the keyframe features.

use candle_core::Tensor;
use rand::Rng;
use tubeshift_core::{decode_box_delta, encode_box_delta, BoundingBox};

use super::anchors::{match_anchors, nms, sample_balanced, AnchorConfig, AnchorLabel};
use super::losses::{bce_with_logits, smooth_l1, zero_scalar};
use crate::error::Result;
use crate::params::{Conv2d, Init, ParamStore};

/// Largest log-scale size delta applied when decoding, `ln(1000 / 16)`.
pub const MAX_LOG_SCALE: f64 = 4.135166556742356;

const RPN_SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

#[derive(Debug, Clone)]
pub struct Rpn {
    conv: Conv2d,
    objectness: Conv2d,
    deltas: Conv2d,
    num_anchors: usize,
}

/// Raw RPN outputs for a batch.
#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `[B, N]` objectness logits, N = H' * W' * A.
    pub objectness: Tensor,
    /// `[B, N, 4]`.
    pub deltas: Tensor,
}

impl Rpn {
    pub fn new(store: &mut ParamStore, in_channels: usize, hidden: usize, num_anchors: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, "rpn.conv", in_channels, hidden, 3, 1, Init::FanIn)?,
            objectness: Conv2d::new(store, "rpn.objectness", hidden, num_anchors, 1, 1, Init::Normal(0.01))?,
            deltas: Conv2d::new(store, "rpn.deltas", hidden, 4 * num_anchors, 1, 1, Init::Normal(0.01))?,
            num_anchors,
        })
    }

    pub fn forward(&self, sf_map: &Tensor) -> Result<RpnOutput> {
        let (b, _, h, w) = sf_map.dims4()?;
        let x = self.conv.forward(sf_map)?.relu()?;
        let n = h * w * self.num_anchors;
        let objectness = self.objectness.forward(&x)?.permute((0, 2, 3, 1))?.reshape((b, n))?;
        let deltas = self.deltas.forward(&x)?.permute((0, 2, 3, 1))?.reshape((b, n, 4))?;
        Ok(RpnOutput { objectness, deltas })
    }
}

/// Objectness cross-entropy over sampled anchors plus smooth-L1 on the deltas
/// of the positive ones, both normalized by the number of sampled anchors.
pub fn rpn_loss<R: Rng>(
    out: &RpnOutput,
    anchors: &[BoundingBox],
    gts: &[Vec<BoundingBox>],
    config: &AnchorConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let (b, n) = out.objectness.dims2()?;
    let mut sampled: Vec<u32> = Vec::new();
    let mut labels: Vec<f32> = Vec::new();
    let mut positive: Vec<u32> = Vec::new();
    let mut targets: Vec<f32> = Vec::new();
    for (img, image_gts) in gts.iter().enumerate().take(b) {
        let matched = match_anchors(anchors, image_gts, config.rpn_positive_iou, config.rpn_negative_iou);
        let pos: Vec<usize> = (0..n).filter(|&i| matches!(matched[i], AnchorLabel::Positive(_))).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| matched[i] == AnchorLabel::Negative).collect();
        let (pos, neg) = sample_balanced(&pos, &neg, config.rpn_batch, config.rpn_positive_fraction, rng);
        for &i in &pos {
            let AnchorLabel::Positive(g) = matched[i] else { unreachable!() };
            sampled.push((img * n + i) as u32);
            labels.push(1.0);
            positive.push((img * n + i) as u32);
            targets.extend(encode_box_delta(&anchors[i], &image_gts[g]).map(|v| v as f32));
        }
        for &i in &neg {
            sampled.push((img * n + i) as u32);
            labels.push(0.0);
        }
    }
    let device = out.objectness.device();
    if sampled.is_empty() {
        return zero_scalar(device);
    }
    let count = sampled.len();
    let idx = Tensor::from_vec(sampled, count, device)?;
    let logits = out.objectness.flatten_all()?.index_select(&idx, 0)?;
    let labels = Tensor::from_vec(labels, count, device)?;
    let l_obj = (bce_with_logits(&logits, &labels)?.sum_all()? / count as f64)?;
    if positive.is_empty() {
        return Ok(l_obj);
    }
    let np = positive.len();
    let pidx = Tensor::from_vec(positive, np, device)?;
    let pred = out.deltas.reshape((b * n, 4))?.index_select(&pidx, 0)?;
    let target = Tensor::from_vec(targets, (np, 4), device)?;
    let l_reg = (smooth_l1(&(pred - target)?, RPN_SMOOTH_L1_BETA)?.sum_all()? / count as f64)?;
    Ok((l_obj + l_reg)?)
}

/// Decodes, clips, ranks and suppresses proposals for every image.
pub fn generate_proposals(
    out: &RpnOutput,
    anchors: &[BoundingBox],
    image_size: (usize, usize),
    config: &AnchorConfig,
) -> Result<Vec<Vec<(BoundingBox, f64)>>> {
    let (img_h, img_w) = (image_size.0 as f64, image_size.1 as f64);
    let logits = out.objectness.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    let deltas = out.deltas.to_dtype(candle_core::DType::F64)?;
    let b = logits.len();
    let mut all = Vec::with_capacity(b);
    for (img, row) in logits.iter().enumerate() {
        let d = deltas.get(img)?.to_vec2::<f64>()?;
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for &i in &order {
            if boxes.len() == config.pre_nms_top {
                break;
            }
            let delta = [
                d[i][0],
                d[i][1],
                d[i][2].min(MAX_LOG_SCALE),
                d[i][3].min(MAX_LOG_SCALE),
            ];
            let Ok(decoded) = decode_box_delta(&anchors[i], delta) else { continue };
            let Ok(clipped) = decoded.clip(img_w, img_h) else { continue };
            if clipped.width() < 1.0 || clipped.height() < 1.0 {
                continue;
            }
            boxes.push(clipped);
            scores.push(1.0 / (1.0 + (-row[i]).exp()));
        }
        let keep = nms(&boxes, &scores, config.nms_iou, config.proposals_kept);
        all.push(keep.into_iter().map(|k| (boxes[k], scores[k])).collect());
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::anchors::generate_anchors;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use tubeshift_core::iou_2d;

    fn setup() -> (Rpn, AnchorConfig, Vec<BoundingBox>) {
        let mut s = ParamStore::new(1);
        let cfg = AnchorConfig::default();
        let rpn = Rpn::new(&mut s, 32, 32, cfg.num_anchors()).unwrap();
        let anchors = generate_anchors(&cfg, (8, 8), 8).unwrap();
        (rpn, cfg, anchors)
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn output_layout() {
        let (rpn, cfg, anchors) = setup();
        let x = Tensor::randn(0f32, 1.0, (2, 32, 8, 8), &Device::Cpu).unwrap();
        let out = rpn.forward(&x).unwrap();
        assert_eq!(out.objectness.dims(), &[2, anchors.len()]);
        assert_eq!(out.deltas.dims(), &[2, anchors.len(), 4]);
        assert_eq!(cfg.num_anchors(), 3);
    }

    #[test]
    fn proposals_are_clipped_and_suppressed() {
        let (rpn, cfg, anchors) = setup();
        let x = Tensor::randn(0f32, 3.0, (2, 32, 8, 8), &Device::Cpu).unwrap();
        let out = rpn.forward(&x).unwrap();
        let props = generate_proposals(&out, &anchors, (64, 64), &cfg).unwrap();
        assert_eq!(props.len(), 2);
        for p in &props {
            assert!(p.len() <= cfg.proposals_kept && !p.is_empty());
            for (i, (a, s)) in p.iter().enumerate() {
                assert!(a.x1() >= 0.0 && a.y1() >= 0.0 && a.x2() <= 64.0 && a.y2() <= 64.0);
                assert!(*s > 0.0 && *s < 1.0);
                for (b, _) in &p[i + 1..] {
                    assert!(iou_2d(a, b) <= cfg.nms_iou);
                }
            }
            assert!(p.windows(2).all(|w| w[0].1 >= w[1].1));
        }
        let one = AnchorConfig { proposals_kept: 1, ..cfg.clone() };
        let top = generate_proposals(&out, &anchors, (64, 64), &one).unwrap();
        assert_eq!(top[0].len(), 1);
        assert_eq!(top[0][0], props[0][0]);
    }

    /// Hand-built outputs: objectness logits and deltas set per anchor.
    fn manual(logits: Vec<f32>, deltas: Vec<f32>) -> RpnOutput {
        let n = logits.len();
        RpnOutput {
            objectness: Tensor::from_vec(logits, (1, n), &Device::Cpu).unwrap(),
            deltas: Tensor::from_vec(deltas, (1, n, 4), &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn loss_without_ground_truth_is_objectness_only() {
        let (_, cfg, anchors) = setup();
        let n = anchors.len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        // zero logits: every sampled negative costs ln 2
        let out = manual(vec![0.0; n], vec![5.0; 4 * n]);
        let l = scalar(&rpn_loss(&out, &anchors, &[vec![]], &cfg, &mut rng).unwrap());
        assert!((l - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn exact_anchor_with_zero_delta_has_no_regression_cost() {
        let (_, cfg, anchors) = setup();
        let n = anchors.len();
        let gt = anchors[100];
        let labels = match_anchors(&anchors, &[gt], cfg.rpn_positive_iou, cfg.rpn_negative_iou);
        // confident, correct objectness everywhere; exact (zero) deltas
        let logits: Vec<f32> = labels
            .iter()
            .map(|l| match l {
                AnchorLabel::Positive(_) => 30.0,
                _ => -30.0,
            })
            .collect();
        let mut deltas = vec![0f32; 4 * n];
        for (i, l) in labels.iter().enumerate() {
            if let AnchorLabel::Positive(_) = l {
                let t = encode_box_delta(&anchors[i], &gt);
                for k in 0..4 {
                    deltas[4 * i + k] = t[k] as f32;
                }
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let l = scalar(&rpn_loss(&manual(logits, deltas), &anchors, &[vec![gt]], &cfg, &mut rng).unwrap());
        assert!(l < 1e-6, "{l}");
    }
}
