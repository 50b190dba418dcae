//! Spatial encoder on the keyframe, temporal image encoder on the clip, ROI
//! pooling and the temporal instance encoder.
//!
//! The spatial and temporal image encoders share one spatial stride, so boxes
//! proposed on the spatial map index the temporal map through the same
//! `1 / stride` scaling.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use tubeshift_core::BoundingBox;

use crate::error::{ModelError, Result};
use crate::params::{Conv2d, Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Power of two.
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub clip_length: usize,
    pub image_channels: usize,
    /// Width of the first convolution of each 2D stack; doubles per layer.
    pub stem_channels: usize,
    pub sf_channels: usize,
    pub tf1_channels: usize,
    pub tf2_channels: usize,
    pub roi_size: usize,
    /// Bilinear samples per ROI bin along each axis.
    pub roi_sampling: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            spatial_stride: 8,
            temporal_stride: 4,
            clip_length: 8,
            image_channels: 3,
            stem_channels: 8,
            sf_channels: 32,
            tf1_channels: 32,
            tf2_channels: 64,
            roi_size: 4,
            roi_sampling: 2,
        }
    }
}

impl EncoderConfig {
    /// Widths of the full-size model: 16 px / 4 frame strides, a 7x7x832 ROI
    /// representation and 1024-wide instance vectors.
    pub fn full_scale() -> Self {
        Self {
            spatial_stride: 16,
            temporal_stride: 4,
            clip_length: 16,
            image_channels: 3,
            stem_channels: 64,
            sf_channels: 1024,
            tf1_channels: 832,
            tf2_channels: 1024,
            roi_size: 7,
            roi_sampling: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !self.spatial_stride.is_power_of_two() || self.spatial_stride < 2 {
            return bad(format!("spatial_stride {} must be a power of two >= 2", self.spatial_stride));
        }
        if self.temporal_stride == 0 || self.clip_length == 0 || self.clip_length % self.temporal_stride != 0 {
            return bad(format!(
                "clip_length {} must be a positive multiple of temporal_stride {}",
                self.clip_length, self.temporal_stride
            ));
        }
        let widths = [
            self.image_channels,
            self.stem_channels,
            self.sf_channels,
            self.tf1_channels,
            self.tf2_channels,
            self.roi_size,
            self.roi_sampling,
        ];
        if widths.contains(&0) {
            return bad("channel counts and ROI sizes must be positive".into());
        }
        Ok(())
    }

    /// Feature grid for an input of `height x width`.
    pub fn grid(&self, height: usize, width: usize) -> (usize, usize) {
        (height.div_ceil(self.spatial_stride), width.div_ceil(self.spatial_stride))
    }

    /// Temporal length after the temporal stride, before flattening.
    pub fn temporal_groups(&self) -> usize {
        self.clip_length / self.temporal_stride
    }
}

/// Stack of stride-2 3x3 convolutions with ReLU, `log2(stride)` deep.
#[derive(Debug, Clone)]
struct StridedStack {
    convs: Vec<Conv2d>,
}

impl StridedStack {
    fn new(store: &mut ParamStore, name: &str, input: usize, stem: usize, output: usize, stride: usize) -> Result<Self> {
        let depth = stride.trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(depth);
        let mut c_in = input;
        for i in 0..depth {
            let c_out = if i + 1 == depth { output } else { (stem << i).min(output) };
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), c_in, c_out, 3, 2, Init::FanIn)?);
            c_in = c_out;
        }
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(x)
    }
}

/// Keyframe encoder: `[B, C, H, W] -> [B, sf_channels, H', W']`.
#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    stack: StridedStack,
    image_channels: usize,
}

impl SpatialEncoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            stack: StridedStack::new(
                store,
                "sf",
                config.image_channels,
                config.stem_channels,
                config.sf_channels,
                config.spatial_stride,
            )?,
            image_channels: config.image_channels,
        })
    }

    pub fn spatial_encode(&self, keyframes: &Tensor) -> Result<Tensor> {
        let dims = keyframes.dims();
        if dims.len() != 4 || dims[1] != self.image_channels {
            return Err(ModelError::Shape(format!(
                "keyframes must be [B, {}, H, W], got {dims:?}",
                self.image_channels
            )));
        }
        self.stack.forward(keyframes)
    }
}

/// Clip encoder. Each run of `temporal_stride` consecutive frames is stacked
/// along channels and passed through a strided 2D stack (a 3D convolution
/// whose temporal kernel equals its temporal stride), then the remaining
/// temporal axis is averaged away.
#[derive(Debug, Clone)]
pub struct TemporalImageEncoder {
    stack: StridedStack,
    config: EncoderConfig,
}

impl TemporalImageEncoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig) -> Result<Self> {
        let stack = StridedStack::new(
            store,
            "tf1",
            config.temporal_stride * config.image_channels,
            config.stem_channels,
            config.tf1_channels,
            config.spatial_stride,
        )?;
        Ok(Self {
            stack,
            config: config.clone(),
        })
    }

    /// Features before temporal flattening: `[B, T / temporal_stride, C, H', W']`.
    pub fn temporal_features(&self, clips: &Tensor) -> Result<Tensor> {
        let dims = clips.dims();
        let c = &self.config;
        if dims.len() != 5 || dims[2] != c.image_channels {
            return Err(ModelError::Shape(format!(
                "clips must be [B, T, {}, H, W], got {dims:?}",
                c.image_channels
            )));
        }
        if dims[1] != c.clip_length {
            return Err(ModelError::Shape(format!(
                "clip length {} does not match configured {}",
                dims[1], c.clip_length
            )));
        }
        let (b, t, ch, h, w) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
        let groups = c.temporal_groups();
        let stacked = clips.reshape((b * groups, (t / groups) * ch, h, w))?;
        let out = self.stack.forward(&stacked)?;
        let (_, oc, gh, gw) = out.dims4()?;
        Ok(out.reshape((b, groups, oc, gh, gw))?)
    }

    pub fn temporal_encode_image(&self, clips: &Tensor) -> Result<Tensor> {
        Ok(self.temporal_features(clips)?.mean(1)?)
    }
}

/// Bilinear ROI pooling from image-space boxes onto a feature map.
///
/// `feature` is `[B, C, H', W']`, `rois[b]` the boxes of image `b`. Boxes are
/// clipped to the image, mapped to feature coordinates by `1 / stride` and
/// sampled on a `roi_size x roi_size` grid. Output `[sum K_b, C, roi, roi]`.
pub fn roi_pool(
    feature: &Tensor,
    rois: &[Vec<BoundingBox>],
    image_size: (usize, usize),
    config: &EncoderConfig,
) -> Result<Tensor> {
    let (b, c, fh, fw) = feature.dims4()?;
    if rois.len() != b {
        return Err(ModelError::Shape(format!("{} ROI lists for a batch of {b}", rois.len())));
    }
    let r = config.roi_size;
    let total: usize = rois.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(Tensor::zeros((0, c, r, r), DType::F32, feature.device())?);
    }
    let mut pooled = Vec::with_capacity(b);
    for (i, boxes) in rois.iter().enumerate() {
        if boxes.is_empty() {
            continue;
        }
        let weights = roi_weights(boxes, image_size, (fh, fw), config)?;
        let fmap = feature.get(i)?.reshape((c, fh * fw))?;
        let out = weights.matmul(&fmap.t()?)?; // [K*r*r, C]
        pooled.push(out.reshape((boxes.len(), r, r, c))?.permute((0, 3, 1, 2))?.contiguous()?);
    }
    Ok(Tensor::cat(&pooled, 0)?)
}

/// Dense `[K * roi * roi, H' * W']` bilinear sampling matrix.
fn roi_weights(
    boxes: &[BoundingBox],
    (img_h, img_w): (usize, usize),
    (fh, fw): (usize, usize),
    config: &EncoderConfig,
) -> Result<Tensor> {
    let r = config.roi_size;
    let s = config.roi_sampling;
    let scale = 1.0 / config.spatial_stride as f64;
    let mut w = vec![0f32; boxes.len() * r * r * fh * fw];
    let sample_weight = 1.0 / (s * s) as f64;
    for (k, bbox) in boxes.iter().enumerate() {
        let clipped = bbox.clip(img_w as f64, img_h as f64)?;
        let x1 = clipped.x1() * scale - 0.5;
        let y1 = clipped.y1() * scale - 0.5;
        let bin_w = clipped.width() * scale / r as f64;
        let bin_h = clipped.height() * scale / r as f64;
        for by in 0..r {
            for bx in 0..r {
                let row = ((k * r + by) * r + bx) * fh * fw;
                for sy in 0..s {
                    let y = y1 + (by as f64 + (sy as f64 + 0.5) / s as f64) * bin_h;
                    for sx in 0..s {
                        let x = x1 + (bx as f64 + (sx as f64 + 0.5) / s as f64) * bin_w;
                        if y < -1.0 || y > fh as f64 || x < -1.0 || x > fw as f64 {
                            continue;
                        }
                        let y = y.clamp(0.0, (fh - 1) as f64);
                        let x = x.clamp(0.0, (fw - 1) as f64);
                        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                        let (y1i, x1i) = ((y0 + 1).min(fh - 1), (x0 + 1).min(fw - 1));
                        let (ly, lx) = (y - y0 as f64, x - x0 as f64);
                        for (yy, xx, wt) in [
                            (y0, x0, (1.0 - ly) * (1.0 - lx)),
                            (y0, x1i, (1.0 - ly) * lx),
                            (y1i, x0, ly * (1.0 - lx)),
                            (y1i, x1i, ly * lx),
                        ] {
                            w[row + yy * fw + xx] += (wt * sample_weight) as f32;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(w, (boxes.len() * r * r, fh * fw), &Device::Cpu)?)
}

/// Per-ROI instance vectors: 3x3 convolution, ReLU, global average pool.
#[derive(Debug, Clone)]
pub struct TemporalInstanceEncoder {
    conv: Conv2d,
    config: EncoderConfig,
}

impl TemporalInstanceEncoder {
    pub fn new(store: &mut ParamStore, config: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, "tf2.conv", config.tf1_channels, config.tf2_channels, 3, 1, Init::FanIn)?,
            config: config.clone(),
        })
    }

    /// `[K, tf1_channels, roi, roi] -> [K, tf2_channels]`.
    pub fn temporal_encode_instance(&self, pooled: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let dims = pooled.dims();
        if dims.len() != 4 || dims[1] != c.tf1_channels || dims[2] != c.roi_size || dims[3] != c.roi_size {
            return Err(ModelError::Shape(format!(
                "pooled ROIs must be [K, {}, {r}, {r}], got {dims:?}",
                c.tf1_channels,
                r = c.roi_size
            )));
        }
        if dims[0] == 0 {
            return Ok(Tensor::zeros((0, c.tf2_channels), DType::F32, pooled.device())?);
        }
        Ok(self.conv.forward(pooled)?.relu()?.mean((2, 3))?)
    }
}

/// Outputs of the three feature extractors for one batch.
#[derive(Debug, Clone)]
pub struct FeatureMaps {
    /// `[B, sf_channels, H', W']` from the keyframes.
    pub sf_map: Tensor,
    /// `[B, tf1_channels, H', W']` from the clips after temporal flattening.
    pub tf1_map: Tensor,
    /// `[K, tf2_channels]`, one row per ROI.
    pub tf2_vectors: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_and(config: &EncoderConfig) -> (ParamStore, SpatialEncoder, TemporalImageEncoder, TemporalInstanceEncoder) {
        let mut s = ParamStore::new(9);
        let sf = SpatialEncoder::new(&mut s, config).unwrap();
        let tf1 = TemporalImageEncoder::new(&mut s, config).unwrap();
        let tf2 = TemporalInstanceEncoder::new(&mut s, config).unwrap();
        (s, sf, tf1, tf2)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn grids_follow_the_stride() {
        let cfg = EncoderConfig::default();
        let (_, sf, tf1, _) = store_and(&cfg);
        let k = randn(&[2, 3, 64, 64], 1);
        assert_eq!(sf.spatial_encode(&k).unwrap().dims(), &[2, 32, 8, 8]);
        let clip = randn(&[2, 8, 3, 64, 64], 2);
        assert_eq!(tf1.temporal_features(&clip).unwrap().dims(), &[2, 2, 32, 8, 8]);
        assert_eq!(tf1.temporal_encode_image(&clip).unwrap().dims(), &[2, 32, 8, 8]);

        let cfg16 = EncoderConfig {
            spatial_stride: 16,
            ..EncoderConfig::default()
        };
        let (_, sf, tf1, _) = store_and(&cfg16);
        for (h, w) in [(112, 112), (60, 90)] {
            let a = sf.spatial_encode(&randn(&[1, 3, h, w], 3)).unwrap();
            let b = tf1.temporal_encode_image(&randn(&[1, 8, 3, h, w], 4)).unwrap();
            assert_eq!(&a.dims()[2..], &b.dims()[2..]);
            assert_eq!((a.dims()[2], a.dims()[3]), cfg16.grid(h, w));
        }
        assert_eq!(cfg16.grid(112, 112), (7, 7));
    }

    #[test]
    fn input_shape_errors() {
        let cfg = EncoderConfig::default();
        let (_, sf, tf1, tf2) = store_and(&cfg);
        assert!(sf.spatial_encode(&randn(&[1, 4, 16, 16], 0)).is_err());
        assert!(tf1.temporal_encode_image(&randn(&[1, 6, 3, 16, 16], 0)).is_err());
        assert!(tf2.temporal_encode_instance(&randn(&[1, 32, 3, 3], 0)).is_err());
    }

    #[test]
    fn deterministic_and_constant_clip_matches_single_frame() {
        let cfg = EncoderConfig::default();
        let (_, sf, tf1, _) = store_and(&cfg);
        let k = randn(&[1, 3, 32, 32], 5);
        assert_eq!(
            sf.spatial_encode(&k).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            sf.spatial_encode(&k).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let clip = k.unsqueeze(1).unwrap().repeat((1, 8, 1, 1, 1)).unwrap();
        let per_group = tf1.temporal_features(&clip).unwrap();
        let flat = tf1.temporal_encode_image(&clip).unwrap();
        let first = per_group.get(0).unwrap().get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let out = flat.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in first.iter().zip(&out) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn flattening_ignores_group_order() {
        let cfg = EncoderConfig::default();
        let (_, _, tf1, _) = store_and(&cfg);
        let clip = randn(&[1, 8, 3, 32, 32], 7);
        let swapped = Tensor::cat(&[clip.narrow(1, 4, 4).unwrap(), clip.narrow(1, 0, 4).unwrap()], 1).unwrap();
        let a = tf1.temporal_encode_image(&clip).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = tf1.temporal_encode_image(&swapped).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn roi_pool_constant_map_and_identical_rois() {
        let cfg = EncoderConfig::default();
        let fmap = Tensor::full(2.5f32, (1, 32, 8, 8), &Device::Cpu).unwrap();
        let whole = BoundingBox::new(0.0, 0.0, 64.0, 64.0).unwrap();
        let pooled = roi_pool(&fmap, &[vec![whole]], (64, 64), &cfg).unwrap();
        assert_eq!(pooled.dims(), &[1, 32, 4, 4]);
        for v in pooled.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((v - 2.5).abs() < 1e-5);
        }
        let fmap = randn(&[2, 32, 8, 8], 6);
        let b = BoundingBox::new(5.0, 7.0, 30.5, 22.0).unwrap();
        // off-image part is clipped away
        let big = BoundingBox::new(-10.0, -10.0, 20.0, 20.0).unwrap();
        let pooled = roi_pool(&fmap, &[vec![b, b], vec![big]], (64, 64), &cfg).unwrap();
        assert_eq!(pooled.dims(), &[3, 32, 4, 4]);
        let p0 = pooled.get(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let p1 = pooled.get(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(p0, p1);
        let outside = BoundingBox::new(70.0, 70.0, 80.0, 80.0).unwrap();
        assert!(roi_pool(&fmap, &[vec![outside], vec![]], (64, 64), &cfg).is_err());
    }

    #[test]
    fn roi_pool_maps_boxes_by_the_stride() {
        // a box covering exactly one feature cell samples only that cell
        let cfg = EncoderConfig {
            roi_size: 1,
            roi_sampling: 1,
            ..EncoderConfig::default()
        };
        let mut v = vec![0f32; 8 * 8];
        v[3 * 8 + 5] = 1.0;
        let fmap = Tensor::from_vec(v, (1, 1, 8, 8), &Device::Cpu).unwrap();
        let cell = BoundingBox::new(5.0 * 8.0, 3.0 * 8.0, 6.0 * 8.0, 4.0 * 8.0).unwrap();
        let p = roi_pool(&fmap, &[vec![cell]], (64, 64), &cfg).unwrap();
        let p = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((p[0] - 1.0).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn instance_vectors_fixed_width() {
        let cfg = EncoderConfig::default();
        let (_, _, _, tf2) = store_and(&cfg);
        let out = tf2.temporal_encode_instance(&randn(&[3, 32, 4, 4], 8)).unwrap();
        assert_eq!(out.dims(), &[3, 64]);
        let empty = Tensor::zeros((0, 32, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(tf2.temporal_encode_instance(&empty).unwrap().dims(), &[0, 64]);
    }

    #[test]
    fn full_scale_roi_contract() {
        let cfg = EncoderConfig::full_scale();
        let mut s = ParamStore::new(0);
        let tf2 = TemporalInstanceEncoder::new(&mut s, &cfg).unwrap();
        let fmap = randn(&[1, 832, 7, 7], 1);
        let b = BoundingBox::new(10.0, 20.0, 90.0, 100.0).unwrap();
        let pooled = roi_pool(&fmap, &[vec![b]], (112, 112), &cfg).unwrap();
        assert_eq!(pooled.dims(), &[1, 832, 7, 7]);
        assert_eq!(tf2.temporal_encode_instance(&pooled).unwrap().dims(), &[1, 1024]);
    }
}
