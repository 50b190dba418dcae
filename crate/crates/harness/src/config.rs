//! Flat run configuration shared by every verb.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tubeshift_core::eval::EvalConfig;
use tubeshift_core::synth::{DomainSpec, GenerationConfig};
use tubeshift_model::{Phase, TrainConfig};

use crate::manifest::RunManifest;

/// Split directories under `data_dir`.
pub const SOURCE_TRAIN: &str = "source_train";
pub const TARGET_TRAIN: &str = "target_train";
pub const TARGET_TEST: &str = "target_test";

/// Offset added to a domain's seed for its held-out split, so test videos
/// have fresh trajectories.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    /// Labeled split trained on; `target_train` gives the oracle.
    pub train_split: String,
    /// Unlabeled split used for adaptation.
    pub adapt_split: String,
    pub eval_split: String,
    /// JSON `DomainSpec` files; the built-in domains when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_spec: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_spec: Option<PathBuf>,
    pub train_videos: usize,
    pub test_videos: usize,
    pub video_length: usize,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub background_frames: bool,
    /// Checkpoint an adaptation run starts from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    pub iou_threshold: f64,
    pub link_alpha: f64,
    pub top_k_error_analysis: usize,
    /// Seeds of the ablation grid.
    pub seeds: Vec<u64>,
    /// Module sets of the ablation grid, besides the baseline.
    pub ablation_rows: Vec<String>,
    pub ablation_oracle: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenerationConfig::default();
        let e = EvalConfig::default();
        Self {
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            train_split: SOURCE_TRAIN.into(),
            adapt_split: TARGET_TRAIN.into(),
            eval_split: TARGET_TEST.into(),
            source_spec: None,
            target_spec: None,
            train_videos: 48,
            test_videos: 128,
            video_length: g.video_length,
            width: g.width,
            height: g.height,
            num_classes: g.num_classes,
            background_frames: false,
            init_checkpoint: None,
            iou_threshold: e.iou_threshold,
            link_alpha: e.link_alpha,
            top_k_error_analysis: e.top_k_error_analysis,
            seeds: vec![0, 1, 2],
            ablation_rows: ["Timg", "Tinst", "Simg", "Timg,Tinst", "Timg,Simg", "Tinst,Simg", "Timg,Tinst,Simg"]
                .map(String::from)
                .to_vec(),
            ablation_oracle: true,
        }
    }
}

impl RunConfig {
    /// Reads a TOML config, or the config recorded in a run manifest
    /// (`.json`), which reproduces that run.
    pub fn load(path: &Path) -> Result<(Self, Option<RunManifest>)> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let m: RunManifest =
                serde_json::from_str(&text).with_context(|| format!("parsing run manifest {}", path.display()))?;
            return Ok((m.config.clone(), Some(m)));
        }
        let config: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok((config, None))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval().validate()?;
        self.generation(1).validate()?;
        if self.train_videos == 0 || self.test_videos == 0 {
            bail!("train_videos and test_videos must be positive");
        }
        Ok(())
    }

    pub fn generation(&self, num_videos: usize) -> GenerationConfig {
        GenerationConfig {
            num_videos,
            video_length: self.video_length,
            width: self.width,
            height: self.height,
            num_classes: self.num_classes,
            background_frames: self.background_frames,
            ..GenerationConfig::default()
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            iou_threshold: self.iou_threshold,
            link_alpha: self.link_alpha,
            top_k_error_analysis: self.top_k_error_analysis,
        }
    }

    pub fn source_domain(&self) -> Result<DomainSpec> {
        load_spec(self.source_spec.as_deref(), DomainSpec::default_source)
    }

    pub fn target_domain(&self) -> Result<DomainSpec> {
        load_spec(self.target_spec.as_deref(), DomainSpec::default_target)
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Hash over the settings that can change a run of `mode`: grid
    /// selection never does, and adaptation settings do not touch pretraining.
    pub fn run_hash(&self, mode: Phase) -> String {
        let d = Self::default();
        let mut c = Self {
            seeds: d.seeds.clone(),
            ablation_rows: d.ablation_rows.clone(),
            ablation_oracle: d.ablation_oracle,
            ..self.clone()
        };
        if mode == Phase::Pretrain {
            let t = &mut c.train;
            t.adapt_steps = d.train.adapt_steps;
            t.adapt_lr = d.train.adapt_lr;
            t.adapt_optimizer = d.train.adapt_optimizer;
            t.n_t = d.train.n_t;
            t.gamma = d.train.gamma;
            t.lambda = d.train.lambda;
            t.map_reduction = d.train.map_reduction;
            c.adapt_split = d.adapt_split;
        }
        c.hash()
    }
}

fn load_spec(path: Option<&Path>, default: fn() -> DomainSpec) -> Result<DomainSpec> {
    let spec = match path {
        None => default(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing spec {}", p.display()))?
        }
    };
    spec.validate()?;
    Ok(spec)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
