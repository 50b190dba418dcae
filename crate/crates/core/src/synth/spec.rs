use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundStyle {
    Flat {
        color: Rgb,
    },
    /// Smooth value-noise texture around `base`, one texture per video.
    Noise {
        base: Rgb,
        amplitude: f32,
        cell: usize,
    },
    /// Vertical blend from `top` to `bottom`.
    Gradient {
        top: Rgb,
        bottom: Rgb,
    },
}

/// Appearance of one domain. Geometry (classes, shapes, trajectories) depends
/// only on `seed`, so two specs that differ in appearance alone render the
/// same actors in the same places.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub background: BackgroundStyle,
    /// Actor color for class `c` is `actor_palette[c % len]`.
    pub actor_palette: Vec<Rgb>,
    pub noise_sigma: f32,
    pub blur_radius: f32,
    pub contrast_scale: f32,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.actor_palette.is_empty() {
            return bad("actor_palette is empty".into());
        }
        let colors = self.actor_palette.iter().chain(match &self.background {
            BackgroundStyle::Flat { color } => vec![color],
            BackgroundStyle::Noise { base, .. } => vec![base],
            BackgroundStyle::Gradient { top, bottom } => vec![top, bottom],
        });
        for c in colors {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("color {c:?} outside [0, 1]"));
            }
        }
        if let BackgroundStyle::Noise { amplitude, cell, .. } = &self.background {
            if *cell == 0 || !(amplitude.is_finite() && *amplitude >= 0.0) {
                return bad("noise background needs cell > 0 and amplitude >= 0".into());
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.blur_radius.is_finite() && self.blur_radius >= 0.0) {
            return bad(format!("blur_radius {} must be >= 0", self.blur_radius));
        }
        if !(self.contrast_scale.is_finite() && self.contrast_scale > 0.0) {
            return bad(format!("contrast_scale {} must be > 0", self.contrast_scale));
        }
        Ok(())
    }

    /// Dark flat background with saturated actors and no noise.
    pub fn default_source() -> Self {
        Self {
            name: "source".into(),
            background: BackgroundStyle::Flat {
                color: [0.12, 0.12, 0.15],
            },
            actor_palette: vec![[0.95, 0.35, 0.25], [0.3, 0.85, 0.35], [0.3, 0.5, 0.95], [0.95, 0.85, 0.3]],
            noise_sigma: 0.0,
            blur_radius: 0.0,
            contrast_scale: 1.0,
            seed: 1,
        }
    }

    /// Bright textured background, shifted palette and sensor noise.
    pub fn default_target() -> Self {
        Self {
            name: "target".into(),
            background: BackgroundStyle::Noise {
                base: [0.3, 0.3, 0.3],
                amplitude: 0.3,
                cell: 8,
            },
            actor_palette: vec![[0.85, 0.6, 0.2], [0.2, 0.75, 0.7], [0.6, 0.35, 0.9], [0.9, 0.5, 0.6]],
            noise_sigma: 0.05,
            blur_radius: 0.0,
            contrast_scale: 1.0,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionPattern {
    Linear,
    Circular,
    Zigzag,
    StationaryJitter,
}

impl MotionPattern {
    pub const ALL: [MotionPattern; 4] = [
        MotionPattern::Linear,
        MotionPattern::Circular,
        MotionPattern::Zigzag,
        MotionPattern::StationaryJitter,
    ];

    /// Class ids map to motion patterns by position in [`MotionPattern::ALL`],
    /// in every domain.
    pub fn for_class(class_id: usize) -> Self {
        Self::ALL[class_id % Self::ALL.len()]
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionPattern::Linear => "linear",
            MotionPattern::Circular => "circular",
            MotionPattern::Zigzag => "zigzag",
            MotionPattern::StationaryJitter => "stationary_jitter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disc,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Triangle];
}

/// One rendered actor: its class, look and per-frame centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAction {
    pub class_id: u32,
    pub instance_id: u32,
    pub motion: MotionPattern,
    pub shape: Shape,
    /// Side length of the shape's bounding square.
    pub size: f64,
    pub centers: Vec<(f64, f64)>,
    /// Frames where the actor is visible, `first..=last`.
    pub first_frame: u32,
    pub last_frame: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub num_videos: usize,
    pub video_length: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// Range of actor sizes in pixels.
    pub actor_size: (f64, f64),
    /// Largest per-axis offset of a stationary actor from its anchor point.
    pub jitter_bound: f64,
    /// Two actors of the same class per video.
    pub multi_instance: bool,
    /// Actor absent for a few frames at the start and end of each video.
    pub background_frames: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_videos: 64,
            video_length: 16,
            width: 64,
            height: 64,
            num_classes: 4,
            actor_size: (12.0, 18.0),
            jitter_bound: 1.0,
            multi_instance: false,
            background_frames: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.video_length == 0 || self.width == 0 || self.height == 0 {
            return bad("video_length, width and height must be positive".into());
        }
        if self.num_classes == 0 || self.num_classes > MotionPattern::ALL.len() {
            return bad(format!(
                "num_classes must be in 1..={}",
                MotionPattern::ALL.len()
            ));
        }
        let (lo, hi) = self.actor_size;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("invalid actor_size range {lo}..{hi}"));
        }
        if !(self.jitter_bound >= 0.0 && self.jitter_bound.is_finite()) {
            return bad("jitter_bound must be >= 0".into());
        }
        Ok(())
    }
}
