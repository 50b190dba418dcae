//! Domain classifiers. Every head ends in a sigmoid giving the probability
//! that its input comes from the target domain.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use tubeshift_core::losses::PROB_EPS;

use crate::encoders::EncoderConfig;
use crate::error::{ModelError, Result};
use crate::params::{Conv2d, Init, Linear, ParamStore};

/// Logits are clamped before the sigmoid so that `1 - p` never rounds to 0
/// in f32, then probabilities are clamped to `[eps, 1 - eps]`.
const LOGIT_BOUND: f64 = 15.9;

pub fn sigmoid(logits: &Tensor) -> Result<Tensor> {
    let z = logits.clamp(-LOGIT_BOUND, LOGIT_BOUND)?;
    let p = (z.neg()?.exp()? + 1.0)?.recip()?;
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub spatial_channels: usize,
    pub image_channels: usize,
    pub instance_hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            spatial_channels: 32,
            image_channels: 32,
            instance_hidden: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_channels == 0 || self.image_channels == 0 || self.instance_hidden == 0 {
            return Err(ModelError::Config("discriminator widths must be positive".into()));
        }
        Ok(())
    }
}

/// `D_S`: two stride-2 convolutions, global average pool, linear logit.
#[derive(Debug, Clone)]
pub struct SpatialDiscriminator {
    conv0: Conv2d,
    conv1: Conv2d,
    out: Linear,
}

impl SpatialDiscriminator {
    pub const PREFIX: &'static str = "d_s.";

    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DiscriminatorConfig) -> Result<Self> {
        let w = cfg.spatial_channels;
        Ok(Self {
            conv0: Conv2d::new(store, "d_s.conv0", enc.sf_channels, w, 3, 2, Init::FanIn)?,
            conv1: Conv2d::new(store, "d_s.conv1", w, w, 3, 2, Init::FanIn)?,
            out: Linear::new(store, "d_s.out", w, 1, Init::FanIn)?,
        })
    }

    /// `[B, C, H, W] -> [B]`.
    pub fn discriminate_spatial(&self, sf_map: &Tensor) -> Result<Tensor> {
        let h = self.conv0.forward(sf_map)?.relu()?;
        let h = self.conv1.forward(&h)?.relu()?.mean((2, 3))?;
        sigmoid(&self.out.forward(&h)?.squeeze(1)?)
    }
}

/// `D_Timg`: 1x1 convolutions giving one probability per map location.
#[derive(Debug, Clone)]
pub struct TemporalImageDiscriminator {
    conv0: Conv2d,
    conv1: Conv2d,
    out: Conv2d,
}

impl TemporalImageDiscriminator {
    pub const PREFIX: &'static str = "d_timg.";

    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DiscriminatorConfig) -> Result<Self> {
        let w = cfg.image_channels;
        Ok(Self {
            conv0: Conv2d::new(store, "d_timg.conv0", enc.tf1_channels, w, 1, 1, Init::FanIn)?,
            conv1: Conv2d::new(store, "d_timg.conv1", w, w, 1, 1, Init::FanIn)?,
            out: Conv2d::new(store, "d_timg.out", w, 1, 1, 1, Init::FanIn)?,
        })
    }

    /// `[B, C, H, W] -> [B, H, W]`.
    pub fn discriminate_temporal_image(&self, tf1_map: &Tensor) -> Result<Tensor> {
        let h = self.conv0.forward(tf1_map)?.relu()?;
        let h = self.conv1.forward(&h)?.relu()?;
        sigmoid(&self.out.forward(&h)?.squeeze(1)?)
    }
}

/// `D_Tinst`: two-layer perceptron on each instance vector.
#[derive(Debug, Clone)]
pub struct TemporalInstanceDiscriminator {
    hidden: Linear,
    out: Linear,
}

impl TemporalInstanceDiscriminator {
    pub const PREFIX: &'static str = "d_tinst.";

    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DiscriminatorConfig) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, "d_tinst.hidden", enc.tf2_channels, cfg.instance_hidden, Init::FanIn)?,
            out: Linear::new(store, "d_tinst.out", cfg.instance_hidden, 1, Init::FanIn)?,
        })
    }

    /// `[K, C] -> [K]`.
    pub fn discriminate_temporal_instance(&self, tf2_vectors: &Tensor) -> Result<Tensor> {
        let k = tf2_vectors.dims2()?.0;
        if k == 0 {
            return Ok(Tensor::zeros(0, DType::F32, tf2_vectors.device())?);
        }
        let h = self.hidden.forward(tf2_vectors)?.relu()?;
        sigmoid(&self.out.forward(&h)?.squeeze(1)?)
    }
}
