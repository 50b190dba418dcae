//! wasm-bindgen surface for the static demo page in `www/`.
//!
//! Everything returns plain numbers, byte buffers or JSON strings so the page
//! needs no bundler.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tubeshift_core::eval::{ground_truth_tubes, link_detections};
use tubeshift_core::losses::{domain_bce, focal_domain_loss};
use tubeshift_core::synth::{annotations, render_video, sample_video_actions, DomainSpec, GenerationConfig};
use tubeshift_core::{iou_3d, BoundingBox, Detection, Domain};
use wasm_bindgen::prelude::*;

/// Both domains share the source seed here, so the page shows one scene in
/// two appearances.
fn domain(name: &str) -> Result<DomainSpec, String> {
    let source = DomainSpec::default_source();
    match name {
        "target" => Ok(DomainSpec {
            seed: source.seed,
            ..DomainSpec::default_target()
        }),
        "source" => Ok(source),
        other => Err(format!("unknown domain {other:?}")),
    }
}

fn generation(video_length: usize) -> GenerationConfig {
    GenerationConfig {
        video_length,
        background_frames: true,
        ..GenerationConfig::default()
    }
}

#[derive(Serialize)]
struct FrameView {
    width: usize,
    height: usize,
    /// RGBA, ready for `ImageData`.
    rgba: Vec<u8>,
    boxes: Vec<([f64; 4], u32)>,
}

/// One frame of video `video_index` in the named domain, with its labels.
/// The same index renders the same actors in both domains.
pub fn frame_json(domain_name: &str, video_index: usize, frame: usize) -> Result<String, String> {
    let spec = domain(domain_name)?;
    let g = generation(16);
    let frame = frame.min(g.video_length - 1);
    let actions = sample_video_actions(&spec, &g, video_index).map_err(|e| e.to_string())?;
    let video = render_video(&spec, &g, video_index, &actions);
    let rgba = video.frames[frame]
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect();
    let boxes = annotations(video_index as u32, &actions)
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|a| a.frame_index as usize == frame)
        .map(|a| (a.bbox.to_array(), a.class_id))
        .collect();
    let view = FrameView {
        width: video.width,
        height: video.height,
        rgba,
        boxes,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// Focal domain loss and plain BCE of a target-domain sample over a grid of
/// discriminator outputs `p(target)` in (0, 1).
pub fn focal_json(gamma: f64, points: usize) -> Result<String, String> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err("gamma must be a finite number >= 0".into());
    }
    let n = points.clamp(2, 1000);
    let rows: Vec<[f64; 3]> = (1..n)
        .map(|i| {
            let p = i as f64 / n as f64;
            [p, focal_domain_loss(p, gamma), domain_bce(p, Domain::Target)]
        })
        .collect();
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct LinkView {
    frames: usize,
    ground_truth: Vec<[f64; 4]>,
    detections: Vec<Vec<([f64; 4], f64)>>,
    tube: Vec<[f64; 4]>,
    tube_score: f64,
    iou_3d: f64,
}

fn jittered(b: &BoundingBox, sigma: f64, rng: &mut ChaCha8Rng) -> Option<BoundingBox> {
    let (cx, cy) = b.center();
    let mut n = || sigma * (rng.random::<f64>() * 2.0 - 1.0);
    BoundingBox::from_center(cx + n(), cy + n(), (b.width() + n()).max(2.0), (b.height() + n()).max(2.0)).ok()
}

/// Jitters the labels of one source video into scored detections, adds
/// `distractors` random boxes per frame, links them and scores the best tube
/// against the ground-truth tube.
pub fn link_json(seed: u64, jitter: f64, distractors: usize, alpha: f64) -> Result<String, String> {
    let spec = DomainSpec::default_source();
    let g = GenerationConfig {
        video_length: 12,
        ..GenerationConfig::default()
    };
    let index = (seed % 64) as usize;
    let actions = sample_video_actions(&spec, &g, index).map_err(|e| e.to_string())?;
    let gt = annotations(0, &actions).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dets = Vec::new();
    for a in &gt {
        if let Some(b) = jittered(&a.bbox, jitter.max(0.0), &mut rng) {
            dets.push(Detection::new(0, a.frame_index, b, a.class_id, rng.random_range(0.4..1.0)).map_err(|e| e.to_string())?);
        }
        for _ in 0..distractors.min(8) {
            let (x, y) = (rng.random_range(0.0..48.0), rng.random_range(0.0..48.0));
            let b = BoundingBox::new(x, y, x + 14.0, y + 14.0).map_err(|e| e.to_string())?;
            dets.push(Detection::new(0, a.frame_index, b, a.class_id, rng.random_range(0.3..0.9)).map_err(|e| e.to_string())?);
        }
    }
    let frames = g.video_length;
    let tubes = link_detections(&dets, &BTreeMap::from([(0, frames as u32)]), alpha).map_err(|e| e.to_string())?;
    // Paths come out best first (scores plus overlap), not by tube score.
    let best = tubes.first().ok_or("no tube")?;
    let truth = ground_truth_tubes(&gt).map_err(|e| e.to_string())?;
    let mut per_frame = vec![Vec::new(); frames];
    for d in &dets {
        per_frame[d.frame_index as usize].push((d.bbox.to_array(), d.score));
    }
    let view = LinkView {
        frames,
        ground_truth: gt.iter().map(|a| a.bbox.to_array()).collect(),
        detections: per_frame,
        tube: best.frames().iter().map(|f| f.bbox.to_array()).collect(),
        tube_score: best.tube_score(),
        iou_3d: truth.first().map_or(0.0, |t| iou_3d(best, t)),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn render_frame(domain_name: &str, video_index: usize, frame: usize) -> Result<String, JsError> {
    js(frame_json(domain_name, video_index, frame))
}

#[wasm_bindgen]
pub fn focal_curve(gamma: f64, points: usize) -> Result<String, JsError> {
    js(focal_json(gamma, points))
}

#[wasm_bindgen]
pub fn link_demo(seed: u64, jitter: f64, distractors: usize, alpha: f64) -> Result<String, JsError> {
    js(link_json(seed, jitter, distractors, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn both_domains_share_geometry() {
        let s: Value = serde_json::from_str(&frame_json("source", 3, 8).unwrap()).unwrap();
        let t: Value = serde_json::from_str(&frame_json("target", 3, 8).unwrap()).unwrap();
        assert_eq!(s["boxes"], t["boxes"]);
        assert_ne!(s["rgba"], t["rgba"]);
        assert_eq!(s["rgba"].as_array().unwrap().len(), 64 * 64 * 4);
        assert!(frame_json("elsewhere", 0, 0).is_err());
    }

    #[test]
    fn focal_curve_is_below_bce() {
        let rows: Vec<[f64; 3]> = serde_json::from_str(&focal_json(2.0, 50).unwrap()).unwrap();
        assert_eq!(rows.len(), 49);
        assert!(rows.iter().all(|r| r[1] <= r[2]));
        let flat: Vec<[f64; 3]> = serde_json::from_str(&focal_json(0.0, 50).unwrap()).unwrap();
        assert!(flat.iter().all(|r| (r[1] - r[2]).abs() < 1e-12));
        assert!(focal_json(-1.0, 10).is_err());
    }

    #[test]
    fn clean_detections_link_into_the_true_tube() {
        let v: Value = serde_json::from_str(&link_json(5, 0.0, 0, 1.0).unwrap()).unwrap();
        assert!((v["iou_3d"].as_f64().unwrap() - 1.0).abs() < 1e-9);
        let noisy: Value = serde_json::from_str(&link_json(5, 2.0, 3, 1.0).unwrap()).unwrap();
        assert_eq!(noisy["tube"].as_array().unwrap().len(), 12);
        assert!(noisy["iou_3d"].as_f64().unwrap() > 0.5, "{}", noisy["iou_3d"]);
    }
}
