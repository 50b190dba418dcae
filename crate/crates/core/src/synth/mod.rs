//! Paired synthetic video domains.
//!
//! Each video holds one actor (optionally two) whose class is its motion
//! pattern. Domains differ only in appearance: background, palette, blur,
//! contrast and sensor noise.

pub mod render;
pub mod spec;
pub mod store;

pub use render::{annotations, render_video, sample_video_actions, VideoFrames};
pub use spec::{BackgroundStyle, DomainSpec, GenerationConfig, MotionPattern, Rgb, Shape, SyntheticAction};
pub use store::{
    clip_window, generate, read_clip, write_clip, DatasetManifest, LabeledClip, LabeledDataset,
    UnlabeledClip, UnlabeledDataset,
};

/// Mean squared pixel difference (in `[0, 1]` units) between two renderings.
pub fn pixel_mse(a: &VideoFrames, b: &VideoFrames) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        for (&x, &y) in fa.iter().zip(fb) {
            let d = (x as f64 - y as f64) / 255.0;
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_grows_with_differing_fields() {
        let config = GenerationConfig {
            num_videos: 8,
            ..Default::default()
        };
        let source = DomainSpec::default_source();
        let target = DomainSpec::default_target();
        let mut variants = vec![source.clone()];
        let mut v = source.clone();
        v.background = target.background.clone();
        variants.push(v.clone());
        v.actor_palette = target.actor_palette.clone();
        variants.push(v.clone());
        v.noise_sigma = target.noise_sigma;
        variants.push(v);

        let mut prev = -1.0;
        for (k, spec) in variants.iter().enumerate() {
            let mut mse = 0.0;
            for vid in 0..config.num_videos {
                let actions = sample_video_actions(&source, &config, vid).unwrap();
                assert_eq!(actions, sample_video_actions(spec, &config, vid).unwrap());
                let a = render_video(&source, &config, vid, &actions);
                let b = render_video(spec, &config, vid, &actions);
                mse += pixel_mse(&a, &b);
            }
            if k == 0 {
                assert_eq!(mse, 0.0);
            }
            assert!(mse > prev, "variant {k}: {mse} <= {prev}");
            prev = mse;
        }
    }
}
