//! On-disk dataset layout.
//!
//! ```text
//! <split>/manifest.json      clip list, class map, DomainSpec, GenerationConfig
//! <split>/annotations.txt    one line per ground-truth instance
//! <split>/clips/vNNNNN.clip  frame container
//! ```
//!
//! Clip container: the 8-byte magic `TSCLIP01`, then five little-endian
//! `u32` (frame count, height, width, channels, dtype code; 1 = u8), then one
//! chunk per frame: `u32` frame index followed by `height * width * channels`
//! bytes in row-major interleaved order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::GroundTruthInstance;
use crate::synth::render::{annotations, render_video, sample_video_actions, VideoFrames};
use crate::synth::spec::{DomainSpec, GenerationConfig, MotionPattern};
use crate::textio;

pub const CLIP_MAGIC: &[u8; 8] = b"TSCLIP01";
pub const DTYPE_U8: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATION_FILE: &str = "annotations.txt";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub video_id: u32,
    pub file: String,
    pub frames: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub domain: DomainSpec,
    pub generation: GenerationConfig,
    /// Class id to motion-pattern name.
    pub classes: Vec<String>,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

pub fn write_clip(path: &Path, video: &VideoFrames) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CLIP_MAGIC)?;
    for v in [
        video.frames.len() as u32,
        video.height as u32,
        video.width as u32,
        3,
        DTYPE_U8,
    ] {
        write(&v.to_le_bytes())?;
    }
    for (i, frame) in video.frames.iter().enumerate() {
        write(&(i as u32).to_le_bytes())?;
        write(frame)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: &Path, video_id: u32) -> Result<VideoFrames> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::ClipFormat {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 28 || &bytes[..8] != CLIP_MAGIC {
        return Err(bad("missing TSCLIP01 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let (count, height, width, channels, dtype) = (word(0), word(1), word(2), word(3), word(4));
    if channels != 3 || dtype != DTYPE_U8 {
        return Err(bad(format!("unsupported channels {channels} / dtype {dtype}")));
    }
    let frame_len = (height * width * channels) as usize;
    let expected = 28 + count as usize * (4 + frame_len);
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut frames = Vec::with_capacity(count as usize);
    let mut at = 28;
    for i in 0..count {
        let index = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if index != i {
            return Err(bad(format!("frame chunk {i} labeled {index}")));
        }
        at += 4;
        frames.push(bytes[at..at + frame_len].to_vec());
        at += frame_len;
    }
    Ok(VideoFrames {
        video_id,
        width: width as usize,
        height: height as usize,
        frames,
    })
}

/// Renders `config.num_videos` videos of `domain` into `dir`.
pub fn generate(domain: &DomainSpec, config: &GenerationConfig, dir: &Path) -> Result<DatasetManifest> {
    domain.validate()?;
    config.validate()?;
    let clip_dir = dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let mut clips = Vec::with_capacity(config.num_videos);
    let mut gts = Vec::new();
    for v in 0..config.num_videos {
        let actions = sample_video_actions(domain, config, v)?;
        let video = render_video(domain, config, v, &actions);
        let file = format!("clips/v{v:05}.clip");
        write_clip(&dir.join(&file), &video)?;
        gts.extend(annotations(v as u32, &actions)?);
        clips.push(ClipEntry {
            video_id: v as u32,
            file,
            frames: config.video_length as u32,
        });
    }
    textio::write_annotations(&dir.join(ANNOTATION_FILE), &gts)?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        domain: domain.clone(),
        generation: config.clone(),
        classes: (0..config.num_classes)
            .map(|c| MotionPattern::for_class(c).name().to_string())
            .collect(),
        clips,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_manifest(dir: &Path) -> Result<Option<DatasetManifest>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn read_videos(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<VideoFrames>> {
    manifest
        .clips
        .iter()
        .map(|c| read_clip(&dir.join(&c.file), c.video_id))
        .collect()
}

/// A dataset opened with its annotations.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub root: PathBuf,
    pub manifest: Option<DatasetManifest>,
    pub videos: Vec<VideoFrames>,
    pub annotations: Vec<GroundTruthInstance>,
}

/// A dataset opened without annotations. The annotation file is never read,
/// and nothing in this type can carry a label.
#[derive(Debug, Clone)]
pub struct UnlabeledDataset {
    pub root: PathBuf,
    pub manifest: Option<DatasetManifest>,
    pub videos: Vec<VideoFrames>,
}

impl LabeledDataset {
    /// A directory without a manifest opens as an empty dataset.
    pub fn open(dir: &Path) -> Result<Self> {
        let Some(manifest) = read_manifest(dir)? else {
            return Ok(Self {
                root: dir.to_path_buf(),
                manifest: None,
                videos: Vec::new(),
                annotations: Vec::new(),
            });
        };
        let videos = read_videos(dir, &manifest)?;
        let annotations = textio::read_annotations(&dir.join(ANNOTATION_FILE))?;
        for g in &annotations {
            if g.class_id as usize >= manifest.num_classes() {
                return Err(Error::InvalidSpec(format!(
                    "annotation class {} outside the {} classes of {}",
                    g.class_id,
                    manifest.num_classes(),
                    dir.display()
                )));
            }
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest: Some(manifest),
            videos,
            annotations,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.as_ref().map_or(0, DatasetManifest::num_classes)
    }

    pub fn annotations_for(&self, video_id: u32, frame_index: u32) -> Vec<GroundTruthInstance> {
        self.annotations
            .iter()
            .filter(|g| g.video_id == video_id && g.frame_index == frame_index)
            .copied()
            .collect()
    }

    /// Every (video, keyframe) clip with the keyframe's ground truth.
    pub fn clips(&self, clip_length: usize) -> impl Iterator<Item = LabeledClip<'_>> + '_ {
        self.videos.iter().flat_map(move |v| {
            (0..v.len()).map(move |k| LabeledClip {
                video: v,
                keyframe: k as u32,
                window: clip_window(v.len(), k, clip_length),
                labels: self.annotations_for(v.video_id, k as u32),
            })
        })
    }

    pub fn without_labels(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            root: self.root.clone(),
            manifest: self.manifest.clone(),
            videos: self.videos.clone(),
        }
    }
}

impl UnlabeledDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let videos = match &manifest {
            Some(m) => read_videos(dir, m)?,
            None => Vec::new(),
        };
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            videos,
        })
    }

    pub fn clips(&self, clip_length: usize) -> impl Iterator<Item = UnlabeledClip<'_>> + '_ {
        self.videos.iter().flat_map(move |v| {
            (0..v.len()).map(move |k| UnlabeledClip {
                video: v,
                keyframe: k as u32,
                window: clip_window(v.len(), k, clip_length),
            })
        })
    }
}

/// Frame indices of a `clip_length` window whose middle frame (index
/// `clip_length / 2`) is `keyframe`, clamped at the video edges.
pub fn clip_window(num_frames: usize, keyframe: usize, clip_length: usize) -> Vec<u32> {
    let half = clip_length / 2;
    (0..clip_length)
        .map(|i| {
            let f = keyframe as isize - half as isize + i as isize;
            f.clamp(0, num_frames as isize - 1) as u32
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LabeledClip<'a> {
    pub video: &'a VideoFrames,
    pub keyframe: u32,
    pub window: Vec<u32>,
    pub labels: Vec<GroundTruthInstance>,
}

#[derive(Debug, Clone)]
pub struct UnlabeledClip<'a> {
    pub video: &'a VideoFrames,
    pub keyframe: u32,
    pub window: Vec<u32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenerationConfig {
        GenerationConfig {
            num_videos: 9,
            video_length: 6,
            ..Default::default()
        }
    }

    #[test]
    fn window_is_centered_and_clamped() {
        assert_eq!(clip_window(16, 8, 8), vec![4, 5, 6, 7, 8, 9, 10, 11]);
        assert_eq!(clip_window(16, 0, 8), vec![0, 0, 0, 0, 0, 1, 2, 3]);
        assert_eq!(clip_window(16, 15, 4), vec![13, 14, 15, 15]);
    }

    #[test]
    fn generate_is_deterministic_and_round_trips() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = DomainSpec::default_target();
        generate(&spec, &small(), a.path()).unwrap();
        generate(&spec, &small(), b.path()).unwrap();
        for f in [MANIFEST_FILE, ANNOTATION_FILE, "clips/v00000.clip", "clips/v00008.clip"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let ds = LabeledDataset::open(a.path()).unwrap();
        assert_eq!(ds.videos.len(), 9);
        assert_eq!(ds.num_classes(), 4);
        let mut expected = Vec::new();
        for v in 0..9 {
            let actions = sample_video_actions(&spec, &small(), v).unwrap();
            expected.extend(annotations(v as u32, &actions).unwrap());
            assert_eq!(ds.videos[v], render_video(&spec, &small(), v, &actions));
        }
        assert_eq!(ds.annotations, expected);
        assert_eq!(ds.clips(4).count(), 9 * 6);
        assert!(ds.clips(4).all(|c| c.labels.len() == 1));
    }

    #[test]
    fn unlabeled_open_ignores_annotations() {
        let dir = tempfile::tempdir().unwrap();
        generate(&DomainSpec::default_source(), &small(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(ANNOTATION_FILE)).unwrap();
        let ds = UnlabeledDataset::open(dir.path()).unwrap();
        assert_eq!(ds.videos.len(), 9);
        assert!(LabeledDataset::open(dir.path()).is_err());
    }

    #[test]
    fn empty_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(LabeledDataset::open(dir.path()).unwrap().clips(8).count(), 0);
        assert_eq!(UnlabeledDataset::open(dir.path()).unwrap().clips(8).count(), 0);
    }

    #[test]
    fn malformed_annotation_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        generate(&DomainSpec::default_source(), &small(), dir.path()).unwrap();
        let path = dir.path().join(ANNOTATION_FILE);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("1,2,3\n");
        let line = text.lines().count();
        fs::write(&path, text).unwrap();
        match LabeledDataset::open(dir.path()) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_clip_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate(&DomainSpec::default_source(), &small(), dir.path()).unwrap();
        let path = dir.path().join("clips/v00001.clip");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_clip(&path, 1), Err(Error::ClipFormat { .. })));
    }

    #[test]
    fn classes_are_balanced() {
        for n in [7usize, 8, 13] {
            let cfg = GenerationConfig { num_videos: n, ..small() };
            let mut counts = vec![0usize; cfg.num_classes];
            for v in 0..n {
                let a = sample_video_actions(&DomainSpec::default_source(), &cfg, v).unwrap();
                counts[a[0].class_id as usize] += 1;
            }
            let ideal = n as f64 / cfg.num_classes as f64;
            assert!(counts.iter().all(|&c| (c as f64 - ideal).abs() <= 1.0), "{counts:?}");
        }
    }
}
