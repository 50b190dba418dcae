//! Trajectories and rasterization of synthetic actors.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::records::GroundTruthInstance;
use crate::synth::spec::{BackgroundStyle, DomainSpec, GenerationConfig, MotionPattern, Rgb, Shape, SyntheticAction};

/// Frames of one video, each `height * width * 3` bytes in row-major RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    pub video_id: u32,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Vec<u8>>,
}

impl VideoFrames {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy)]
enum Stream {
    Geometry = 0,
    Texture = 1,
    Noise = 2,
}

/// Independent generator per (master seed, video, purpose).
fn stream_rng(seed: u64, video: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(video * 4 + stream as u64);
    rng
}

fn offsets(motion: MotionPattern, len: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    match motion {
        MotionPattern::Linear => {
            let speed = rng.random_range(1.2..2.0);
            let angle = rng.random_range(0.0..TAU);
            (0..len)
                .map(|t| {
                    let t = t as f64;
                    (speed * angle.cos() * t, speed * angle.sin() * t)
                })
                .collect()
        }
        MotionPattern::Circular => {
            let radius = rng.random_range(6.0..10.0);
            let omega = rng.random_range(0.4..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let phase = rng.random_range(0.0..TAU);
            (0..len)
                .map(|t| {
                    let a = phase + omega * t as f64;
                    (radius * a.cos(), radius * a.sin())
                })
                .collect()
        }
        MotionPattern::Zigzag => {
            let vx = rng.random_range(1.0..1.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amplitude = rng.random_range(4.0..7.0);
            let period = 6.0;
            let vertical = rng.random_bool(0.5);
            (0..len)
                .map(|t| {
                    let t = t as f64;
                    let phase = (t / period).fract();
                    let tri = amplitude * (4.0 * (phase - 0.5).abs() - 1.0);
                    if vertical {
                        (tri, vx * t)
                    } else {
                        (vx * t, tri)
                    }
                })
                .collect()
        }
        MotionPattern::StationaryJitter => (0..len)
            .map(|_| {
                if jitter > 0.0 {
                    (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
                } else {
                    (0.0, 0.0)
                }
            })
            .collect(),
    }
}

/// Samples one actor and places its trajectory fully inside the image.
pub fn sample_action(
    config: &GenerationConfig,
    class_id: u32,
    instance_id: u32,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticAction> {
    let motion = MotionPattern::for_class(class_id as usize);
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let (lo, hi) = config.actor_size;
    let size = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let rel = offsets(motion, config.video_length, config.jitter_bound, rng);
    let (min_x, max_x) = rel.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_y, max_y) = rel.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let half = 0.5 * size;
    // feasible range for the anchor so every frame's box stays inside
    let x_lo = half - min_x;
    let x_hi = config.width as f64 - half - max_x;
    let y_lo = half - min_y;
    let y_hi = config.height as f64 - half - max_y;
    if x_lo > x_hi || y_lo > y_hi {
        return Err(Error::ImageTooSmall {
            width: config.width,
            height: config.height,
            class_id: class_id as usize,
            needed: (max_x - min_x).max(max_y - min_y) + size,
        });
    }
    let ax = if x_hi > x_lo { rng.random_range(x_lo..x_hi) } else { x_lo };
    let ay = if y_hi > y_lo { rng.random_range(y_lo..y_hi) } else { y_lo };
    let len = config.video_length as u32;
    let (first_frame, last_frame) = if config.background_frames && len >= 4 {
        (rng.random_range(0..len / 4), len - 1 - rng.random_range(0..len / 4))
    } else {
        (0, len - 1)
    };
    Ok(SyntheticAction {
        class_id,
        instance_id,
        motion,
        shape,
        size,
        centers: rel.iter().map(|&(x, y)| (ax + x, ay + y)).collect(),
        first_frame,
        last_frame,
    })
}

impl SyntheticAction {
    pub fn box_at(&self, frame: usize) -> Result<BoundingBox> {
        let (cx, cy) = self.centers[frame];
        BoundingBox::from_center(cx, cy, self.size, self.size)
    }

    pub fn visible_at(&self, frame: usize) -> bool {
        (self.first_frame as usize..=self.last_frame as usize).contains(&frame)
    }

    /// Whether the point lies inside the shape on `frame`.
    fn covers(&self, frame: usize, x: f64, y: f64) -> bool {
        let (cx, cy) = self.centers[frame];
        let half = 0.5 * self.size;
        let (dx, dy) = (x - cx, y - cy);
        match self.shape {
            Shape::Square => dx.abs() <= half && dy.abs() <= half,
            Shape::Disc => dx * dx + dy * dy <= half * half,
            // apex at the top center, base along the bottom edge
            Shape::Triangle => dy <= half && dy >= -half && dx.abs() <= 0.5 * (dy + half),
        }
    }
}

/// Geometry of every actor in a video; depends on the seed only.
pub fn sample_video_actions(
    spec: &DomainSpec,
    config: &GenerationConfig,
    video_index: usize,
) -> Result<Vec<SyntheticAction>> {
    let mut rng = stream_rng(spec.seed, video_index as u64, Stream::Geometry);
    let class_id = (video_index % config.num_classes) as u32;
    let count = if config.multi_instance { 2 } else { 1 };
    (0..count)
        .map(|i| sample_action(config, class_id, i, &mut rng))
        .collect()
}

fn value_noise(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: usize) -> Vec<f32> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f32 / cell as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..width {
            let fx = x as f32 / cell as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
            let bottom = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn background(spec: &DomainSpec, width: usize, height: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut img = vec![0.0f32; width * height * 3];
    match &spec.background {
        BackgroundStyle::Flat { color } => {
            for px in img.chunks_exact_mut(3) {
                px.copy_from_slice(color);
            }
        }
        BackgroundStyle::Noise {
            base,
            amplitude,
            cell,
        } => {
            let tex: Vec<Vec<f32>> = (0..3).map(|_| value_noise(rng, width, height, *cell)).collect();
            for (i, px) in img.chunks_exact_mut(3).enumerate() {
                for c in 0..3 {
                    px[c] = base[c] + amplitude * (tex[c][i] - 0.5);
                }
            }
        }
        BackgroundStyle::Gradient { top, bottom } => {
            for y in 0..height {
                let t = if height > 1 { y as f32 / (height - 1) as f32 } else { 0.0 };
                for x in 0..width {
                    let px = &mut img[(y * width + x) * 3..][..3];
                    for c in 0..3 {
                        px[c] = top[c] * (1.0 - t) + bottom[c] * t;
                    }
                }
            }
        }
    }
    img
}

fn box_blur(img: &[f32], width: usize, height: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return img.to_vec();
    }
    let pass = |src: &[f32], horizontal: bool| {
        let mut dst = vec![0.0f32; src.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    let (pos, limit) = if horizontal { (x, width) } else { (y, height) };
                    let lo = pos.saturating_sub(radius);
                    let hi = (pos + radius).min(limit - 1);
                    for k in lo..=hi {
                        let (sx, sy) = if horizontal { (k, y) } else { (x, k) };
                        sum += src[(sy * width + sx) * 3 + c];
                        n += 1.0;
                    }
                    dst[(y * width + x) * 3 + c] = sum / n;
                }
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

const SUBSAMPLES: [f64; 2] = [0.25, 0.75];

/// Renders the frames of one video in the given domain.
pub fn render_video(
    spec: &DomainSpec,
    config: &GenerationConfig,
    video_index: usize,
    actions: &[SyntheticAction],
) -> VideoFrames {
    let (w, h) = (config.width, config.height);
    let mut tex_rng = stream_rng(spec.seed, video_index as u64, Stream::Texture);
    let mut noise_rng = stream_rng(spec.seed, video_index as u64, Stream::Noise);
    let bg = background(spec, w, h, &mut tex_rng);
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).ok();
    let blur = spec.blur_radius.round() as usize;
    let mut frames = Vec::with_capacity(config.video_length);
    for t in 0..config.video_length {
        let mut img = bg.clone();
        for action in actions.iter().filter(|a| a.visible_at(t)) {
            let color: Rgb = spec.actor_palette[action.class_id as usize % spec.actor_palette.len()];
            let b = action.box_at(t).expect("actor boxes are valid by construction");
            let x0 = b.x1().floor().max(0.0) as usize;
            let y0 = b.y1().floor().max(0.0) as usize;
            let x1 = (b.x2().ceil() as usize).min(w);
            let y1 = (b.y2().ceil() as usize).min(h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let mut hits = 0;
                    for sy in SUBSAMPLES {
                        for sx in SUBSAMPLES {
                            if action.covers(t, x as f64 + sx, y as f64 + sy) {
                                hits += 1;
                            }
                        }
                    }
                    if hits > 0 {
                        let a = hits as f32 / 4.0;
                        let px = &mut img[(y * w + x) * 3..][..3];
                        for c in 0..3 {
                            px[c] = px[c] * (1.0 - a) + color[c] * a;
                        }
                    }
                }
            }
        }
        let mut img = box_blur(&img, w, h, blur);
        for v in img.iter_mut() {
            *v = 0.5 + (*v - 0.5) * spec.contrast_scale;
        }
        if let Some(dist) = noise.filter(|_| spec.noise_sigma > 0.0) {
            for v in img.iter_mut() {
                *v += dist.sample(&mut noise_rng);
            }
        }
        frames.push(img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect());
    }
    VideoFrames {
        video_id: video_index as u32,
        width: w,
        height: h,
        frames,
    }
}

/// Per-frame ground truth, one record per visible actor.
pub fn annotations(video_id: u32, actions: &[SyntheticAction]) -> Result<Vec<GroundTruthInstance>> {
    let mut out = Vec::new();
    for a in actions {
        for t in a.first_frame as usize..=a.last_frame as usize {
            out.push(GroundTruthInstance {
                video_id,
                frame_index: t as u32,
                bbox: a.box_at(t)?,
                class_id: a.class_id,
                instance_id: a.instance_id,
            });
        }
    }
    out.sort_by_key(|g| (g.frame_index, g.instance_id));
    Ok(out)
}
