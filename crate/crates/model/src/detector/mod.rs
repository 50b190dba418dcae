//! The two-backbone actor detector: RPN on the keyframe features, ROI pooling
//! of the same proposals on the clip features, and a box head on the pooled
//! instance vectors.

pub mod anchors;
pub mod head;
pub mod losses;
pub mod rpn;

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tubeshift_core::{decode_box_delta, BoundingBox};

pub use anchors::AnchorConfig;
pub use head::HeadConfig;

use crate::adaptation::ModuleFlags;
use crate::discriminators::{
    DiscriminatorConfig, SpatialDiscriminator, TemporalImageDiscriminator, TemporalInstanceDiscriminator,
};
use crate::encoders::{roi_pool, EncoderConfig, FeatureMaps, SpatialEncoder, TemporalImageEncoder, TemporalInstanceEncoder};
use crate::error::{ModelError, Result};
use crate::params::ParamStore;
use head::BoxHead;
use rpn::{Rpn, RpnOutput, MAX_LOG_SCALE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub rpn_channels: usize,
    pub encoder: EncoderConfig,
    pub anchors: AnchorConfig,
    pub head: HeadConfig,
    pub discriminators: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            rpn_channels: 32,
            encoder: EncoderConfig::default(),
            anchors: AnchorConfig::default(),
            head: HeadConfig::default(),
            discriminators: DiscriminatorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.rpn_channels == 0 {
            return Err(ModelError::Config("num_classes and rpn_channels must be positive".into()));
        }
        self.encoder.validate()?;
        self.anchors.validate()?;
        self.head.validate()?;
        self.discriminators.validate()
    }

    /// The part of the configuration that determines parameter shapes.
    fn architecture(&self) -> serde_json::Value {
        serde_json::json!({
            "num_classes": self.num_classes,
            "rpn_channels": self.rpn_channels,
            "num_anchors": self.anchors.num_anchors(),
            "encoder": self.encoder,
            "discriminators": self.discriminators,
        })
    }
}

/// Detection losses as scalars; `l_act` is the sum of the other three.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLosses {
    pub l_rpn: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_act: f64,
}

impl DetectionLosses {
    pub fn new(l_rpn: f64, l_cls: f64, l_reg: f64) -> Self {
        Self {
            l_rpn,
            l_cls,
            l_reg,
            l_act: l_rpn + l_cls + l_reg,
        }
    }
}

/// Graph-attached detection losses from one forward pass.
#[derive(Debug, Clone)]
pub struct DetectionLossTensors {
    pub rpn: Tensor,
    pub cls: Tensor,
    pub reg: Tensor,
}

impl DetectionLossTensors {
    pub fn total(&self) -> Result<Tensor> {
        Ok(((&self.rpn + &self.cls)? + &self.reg)?)
    }

    pub fn values(&self) -> Result<DetectionLosses> {
        Ok(DetectionLosses::new(scalar(&self.rpn)?, scalar(&self.cls)?, scalar(&self.reg)?))
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone)]
pub struct SourceOutputs {
    pub losses: DetectionLossTensors,
    pub features: FeatureMaps,
    /// Sampled ROIs per image; rows of `features.tf2_vectors` in order.
    pub rois_per_image: Vec<usize>,
    /// RPN proposals per image, before ROI sampling.
    pub proposals: Vec<Vec<BoundingBox>>,
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct TargetOutputs {
    pub sf_map: Option<Tensor>,
    pub tf1_map: Option<Tensor>,
    pub tf2_vectors: Option<Tensor>,
    pub rois_per_image: Vec<usize>,
}

/// A detection on one keyframe, before it is tied to a video and frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeDetection {
    pub class_id: u32,
    pub score: f64,
    pub bbox: BoundingBox,
}

pub struct ActionDetector {
    store: ParamStore,
    config: ModelConfig,
    sf: SpatialEncoder,
    tf1: TemporalImageEncoder,
    tf2: TemporalInstanceEncoder,
    rpn: Rpn,
    head: BoxHead,
    d_s: SpatialDiscriminator,
    d_timg: TemporalImageDiscriminator,
    d_tinst: TemporalInstanceDiscriminator,
}

impl ActionDetector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let enc = &config.encoder;
        let sf = SpatialEncoder::new(&mut store, enc)?;
        let tf1 = TemporalImageEncoder::new(&mut store, enc)?;
        let tf2 = TemporalInstanceEncoder::new(&mut store, enc)?;
        let rpn = Rpn::new(&mut store, enc.sf_channels, config.rpn_channels, config.anchors.num_anchors())?;
        let head = BoxHead::new(&mut store, enc.tf2_channels, config.num_classes)?;
        let d_s = SpatialDiscriminator::new(&mut store, enc, &config.discriminators)?;
        let d_timg = TemporalImageDiscriminator::new(&mut store, enc, &config.discriminators)?;
        let d_tinst = TemporalInstanceDiscriminator::new(&mut store, enc, &config.discriminators)?;
        Ok(Self {
            store,
            config,
            sf,
            tf1,
            tf2,
            rpn,
            head,
            d_s,
            d_timg,
            d_tinst,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn spatial_discriminator(&self) -> &SpatialDiscriminator {
        &self.d_s
    }

    pub fn temporal_image_discriminator(&self) -> &TemporalImageDiscriminator {
        &self.d_timg
    }

    pub fn temporal_instance_discriminator(&self) -> &TemporalInstanceDiscriminator {
        &self.d_tinst
    }

    /// Keyframe (`[B, C, H, W]`) of each clip in `[B, T, C, H, W]`.
    pub fn keyframes(&self, clips: &Tensor) -> Result<Tensor> {
        let mid = self.config.encoder.clip_length / 2;
        if clips.rank() != 5 || clips.dims()[1] <= mid {
            return Err(ModelError::Shape(format!("clips must be [B, T, C, H, W], got {:?}", clips.dims())));
        }
        Ok(clips.narrow(1, mid, 1)?.squeeze(1)?.contiguous()?)
    }

    fn image_size(clips: &Tensor) -> (usize, usize) {
        let d = clips.dims();
        (d[3], d[4])
    }

    fn anchors_for(&self, sf_map: &Tensor) -> Result<Vec<BoundingBox>> {
        let (_, _, h, w) = sf_map.dims4()?;
        anchors::generate_anchors(&self.config.anchors, (h, w), self.config.encoder.spatial_stride)
    }

    fn proposals(&self, out: &RpnOutput, anchors: &[BoundingBox], image: (usize, usize)) -> Result<Vec<Vec<BoundingBox>>> {
        Ok(rpn::generate_proposals(out, anchors, image, &self.config.anchors)?
            .into_iter()
            .map(|p| p.into_iter().map(|(b, _)| b).collect())
            .collect())
    }

    /// TF2 vectors of `rois` pooled from a TF1 map; one row per box.
    pub fn instance_vectors(&self, tf1_map: &Tensor, rois: &[Vec<BoundingBox>], image: (usize, usize)) -> Result<Tensor> {
        let pooled = roi_pool(tf1_map, rois, image, &self.config.encoder)?;
        self.tf2.temporal_encode_instance(&pooled)
    }

    /// Training pass on labeled clips. `gts[b]` holds `(box, class)` pairs on
    /// the keyframe of clip `b`; all sampling draws from `rng`.
    pub fn forward_source<R: Rng>(&self, clips: &Tensor, gts: &[Vec<(BoundingBox, u32)>], rng: &mut R) -> Result<SourceOutputs> {
        let b = clips.dims()[0];
        if gts.len() != b {
            return Err(ModelError::Shape(format!("{} label lists for {b} clips", gts.len())));
        }
        let image = Self::image_size(clips);
        let sf_map = self.sf.spatial_encode(&self.keyframes(clips)?)?;
        let tf1_map = self.tf1.temporal_encode_image(clips)?;
        let anchors = self.anchors_for(&sf_map)?;
        let rpn_out = self.rpn.forward(&sf_map)?;
        let gt_boxes: Vec<Vec<BoundingBox>> = gts.iter().map(|g| g.iter().map(|x| x.0).collect()).collect();
        let l_rpn = rpn::rpn_loss(&rpn_out, &anchors, &gt_boxes, &self.config.anchors, rng)?;
        let proposals = self.proposals(&rpn_out, &anchors, image)?;

        let mut rois = Vec::with_capacity(b);
        let mut labels = Vec::new();
        let mut targets = Vec::new();
        for (props, g) in proposals.iter().zip(gts) {
            let t = head::sample_rois(props, g, &self.config.head, rng);
            labels.extend(t.labels);
            targets.extend(t.deltas);
            rois.push(t.rois);
        }
        let pooled = roi_pool(&tf1_map, &rois, image, &self.config.encoder)?;
        let tf2_vectors = self.tf2.temporal_encode_instance(&pooled)?;
        let (logits, deltas) = self.head.classify_and_regress(&tf2_vectors)?;
        let (l_cls, l_reg) = head::detection_loss(&logits, &deltas, &labels, &targets)?;
        Ok(SourceOutputs {
            losses: DetectionLossTensors {
                rpn: l_rpn,
                cls: l_cls,
                reg: l_reg,
            },
            rois_per_image: rois.iter().map(Vec::len).collect(),
            proposals,
            image_size: image,
            features: FeatureMaps {
                sf_map,
                tf1_map,
                tf2_vectors,
            },
        })
    }

    /// Features of unlabeled clips, computed only as far as `flags` needs.
    pub fn forward_target(&self, clips: &Tensor, flags: ModuleFlags) -> Result<TargetOutputs> {
        let image = Self::image_size(clips);
        let need_sf = flags.simg || flags.tinst;
        let need_tf1 = flags.timg || flags.tinst;
        let sf_map = if need_sf {
            Some(self.sf.spatial_encode(&self.keyframes(clips)?)?)
        } else {
            None
        };
        let tf1_map = if need_tf1 {
            Some(self.tf1.temporal_encode_image(clips)?)
        } else {
            None
        };
        let mut rois_per_image = Vec::new();
        let tf2_vectors = match (&sf_map, &tf1_map) {
            (Some(sf), Some(tf1)) if flags.tinst => {
                let anchors = self.anchors_for(sf)?;
                let rois = self.proposals(&self.rpn.forward(sf)?, &anchors, image)?;
                rois_per_image = rois.iter().map(Vec::len).collect();
                Some(self.instance_vectors(tf1, &rois, image)?)
            }
            _ => None,
        };
        Ok(TargetOutputs {
            sf_map,
            tf1_map,
            tf2_vectors,
            rois_per_image,
        })
    }

    /// Scored, class-wise suppressed detections on each clip's keyframe.
    pub fn detect(&self, clips: &Tensor) -> Result<Vec<Vec<KeyframeDetection>>> {
        let image = Self::image_size(clips);
        let (img_h, img_w) = (image.0 as f64, image.1 as f64);
        let sf_map = self.sf.spatial_encode(&self.keyframes(clips)?)?;
        let tf1_map = self.tf1.temporal_encode_image(clips)?;
        let anchors = self.anchors_for(&sf_map)?;
        let rois = self.proposals(&self.rpn.forward(&sf_map)?, &anchors, image)?;
        let pooled = roi_pool(&tf1_map, &rois, image, &self.config.encoder)?;
        let vectors = self.tf2.temporal_encode_instance(&pooled)?;
        let (logits, deltas) = self.head.classify_and_regress(&vectors)?;
        let mut out = Vec::with_capacity(rois.len());
        if vectors.dims()[0] == 0 {
            out.resize(rois.len(), Vec::new());
            return Ok(out);
        }
        let probs = candle_nn::ops::softmax(&logits, 1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let deltas = deltas.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let cfg = &self.config.head;
        let w = cfg.box_weights;
        let mut row = 0;
        for image_rois in &rois {
            let mut per_class: Vec<Vec<KeyframeDetection>> = vec![Vec::new(); self.config.num_classes];
            for roi in image_rois {
                for (c, dets) in per_class.iter_mut().enumerate() {
                    let score = probs[row][c + 1];
                    if score < cfg.score_threshold {
                        continue;
                    }
                    let d = &deltas[row][4 * c..4 * c + 4];
                    let delta = [
                        d[0] / w[0],
                        d[1] / w[1],
                        (d[2] / w[2]).min(MAX_LOG_SCALE),
                        (d[3] / w[3]).min(MAX_LOG_SCALE),
                    ];
                    let Ok(bbox) = decode_box_delta(roi, delta).and_then(|b| b.clip(img_w, img_h)) else {
                        continue;
                    };
                    dets.push(KeyframeDetection {
                        class_id: c as u32,
                        score: score.clamp(0.0, 1.0),
                        bbox,
                    });
                }
                row += 1;
            }
            let mut kept: Vec<KeyframeDetection> = Vec::new();
            for dets in per_class {
                let boxes: Vec<BoundingBox> = dets.iter().map(|d| d.bbox).collect();
                let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
                kept.extend(anchors::nms(&boxes, &scores, cfg.nms_iou, usize::MAX).into_iter().map(|i| dets[i]));
            }
            kept.sort_by(|a, b| b.score.total_cmp(&a.score));
            kept.truncate(cfg.max_detections);
            out.push(kept);
        }
        Ok(out)
    }

    /// Writes all parameters with the architecture and caller metadata.
    pub fn save(&self, path: &Path, mut metadata: HashMap<String, String>) -> Result<()> {
        metadata.insert("architecture".into(), self.config.architecture().to_string());
        metadata.insert("model_config".into(), serde_json::to_string(&self.config)?);
        self.store.save(path, metadata)
    }

    /// Loads parameters saved by [`ActionDetector::save`]; the checkpoint's
    /// architecture must equal this model's.
    pub fn load(&self, path: &Path) -> Result<HashMap<String, String>> {
        let meta = ParamStore::read_metadata(path)?;
        let mismatch = |message: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let stored = meta
            .get("architecture")
            .ok_or_else(|| mismatch("no architecture metadata".into()))?;
        let stored: serde_json::Value = serde_json::from_str(stored)?;
        if stored != self.config.architecture() {
            return Err(mismatch(format!(
                "built for {stored}, model is {}",
                self.config.architecture()
            )));
        }
        self.store.load(path)?;
        Ok(meta)
    }

    /// Model config stored in a checkpoint.
    pub fn checkpoint_config(path: &Path) -> Result<ModelConfig> {
        let meta = ParamStore::read_metadata(path)?;
        let raw = meta.get("model_config").ok_or_else(|| ModelError::Checkpoint {
            path: path.display().to_string(),
            message: "no model_config metadata".into(),
        })?;
        Ok(serde_json::from_str(raw)?)
    }
}
