//! Clip tensors from decoded videos, and batched inference over a corpus.

use candle_core::{Device, Tensor};
use tubeshift_core::synth::VideoFrames;
use tubeshift_core::Detection;

use crate::detector::ActionDetector;
use crate::error::Result;

/// Pixel normalization to roughly `[-1, 1]`.
fn normalize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Appends the frames of `window` in `[T, 3, H, W]` layout.
pub fn push_clip(out: &mut Vec<f32>, video: &VideoFrames, window: &[u32]) {
    let (h, w) = (video.height, video.width);
    for &f in window {
        let frame = &video.frames[f as usize];
        for c in 0..3 {
            out.extend((0..h * w).map(|i| normalize(frame[i * 3 + c])));
        }
    }
}

/// `[B, T, 3, H, W]` tensor of the given `(video, window)` clips.
pub fn clip_batch(clips: &[(&VideoFrames, &[u32])]) -> Result<Tensor> {
    let (h, w) = clips.first().map_or((0, 0), |c| (c.0.height, c.0.width));
    let t = clips.first().map_or(0, |c| c.1.len());
    let mut data = Vec::with_capacity(clips.len() * t * 3 * h * w);
    for (video, window) in clips {
        push_clip(&mut data, video, window);
    }
    Ok(Tensor::from_vec(data, (clips.len(), t, 3, h, w), &Device::Cpu)?)
}

/// Runs the detector with every frame of every video as keyframe.
pub fn predict(model: &ActionDetector, videos: &[VideoFrames], batch_size: usize) -> Result<Vec<Detection>> {
    let t = model.config().encoder.clip_length;
    let mut jobs: Vec<(&VideoFrames, u32, Vec<u32>)> = Vec::new();
    for v in videos {
        for k in 0..v.len() {
            jobs.push((v, k as u32, tubeshift_core::synth::clip_window(v.len(), k, t)));
        }
    }
    let mut out = Vec::new();
    for chunk in jobs.chunks(batch_size.max(1)) {
        let clips: Vec<(&VideoFrames, &[u32])> = chunk.iter().map(|j| (j.0, j.2.as_slice())).collect();
        let dets = model.detect(&clip_batch(&clips)?)?;
        for (job, image_dets) in chunk.iter().zip(dets) {
            for d in image_dets {
                out.push(Detection::new(job.0.video_id, job.1, d.bbox, d.class_id, d.score)?);
            }
        }
    }
    Ok(out)
}
