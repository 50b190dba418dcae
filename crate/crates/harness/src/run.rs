//! One process-sized unit of work per verb.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tubeshift_core::eval::{error_analysis, evaluate as score, ErrorBreakdown, MetricsReport};
use tubeshift_core::synth::{self, DomainSpec, LabeledDataset, UnlabeledDataset};
use tubeshift_core::{textio, Detection};
use tubeshift_model::train::{log_line, LOG_HEADER};
use tubeshift_model::{data, train_phase, ActionDetector, LossBundle, ModuleFlags, Phase};

use crate::config::{file_sha256, RunConfig, SOURCE_TRAIN, TARGET_TEST, TARGET_TRAIN, TEST_SEED_OFFSET};
use crate::manifest::RunManifest;

pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const DETECTIONS_FILE: &str = "detections.txt";
pub const METRICS_FILE: &str = "metrics.kv";
pub const REPORT_FILE: &str = "report.txt";
pub const ERRORS_FILE: &str = "errors.kv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Renders the three splits under `config.data_dir`.
pub fn generate(config: &RunConfig) -> Result<Vec<(String, usize)>> {
    config.validate()?;
    let source = config.source_domain()?;
    let target = config.target_domain()?;
    let held_out = DomainSpec {
        seed: target.seed.wrapping_add(TEST_SEED_OFFSET),
        ..target.clone()
    };
    let splits = [
        (SOURCE_TRAIN, &source, config.train_videos),
        (TARGET_TRAIN, &target, config.train_videos),
        (TARGET_TEST, &held_out, config.test_videos),
    ];
    let mut out = Vec::new();
    for (name, spec, n) in splits {
        let dir = config.split(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        let m = synth::generate(spec, &config.generation(n), &dir)?;
        log::info!("{name}: {} videos in {}", m.clips.len(), dir.display());
        out.push((name.to_string(), m.clips.len()));
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<LossBundle>,
}

/// Trains one phase and writes the checkpoint, loss log and manifest to `out`.
/// Adaptation starts from `config.init_checkpoint`.
pub fn train(config: &RunConfig, mode: Phase, flags: ModuleFlags, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let flags = if mode == Phase::Pretrain {
        if flags.any() {
            log::warn!("module flags {flags} ignored in pretrain mode");
        }
        ModuleFlags::NONE
    } else {
        flags
    };
    let source = LabeledDataset::open(&config.split(&config.train_split))?;
    if source.videos.is_empty() {
        bail!("no labeled videos in {}; run generate first", source.root.display());
    }
    let target = match mode {
        Phase::Adapt => Some(UnlabeledDataset::open(&config.split(&config.adapt_split))?),
        Phase::Pretrain => None,
    };
    let seed = config.train.seed;
    let model = ActionDetector::new(config.train.model_config(source.num_classes()), seed)?;
    let mut manifest = RunManifest::new("train", config);
    manifest.mode = Some(mode.to_string());
    manifest.modules = flags.to_string();
    match (&config.init_checkpoint, mode) {
        (Some(init), _) => {
            model.load(init).with_context(|| format!("loading {}", init.display()))?;
            manifest.init_sha256 = Some(file_sha256(init)?);
        }
        (None, Phase::Adapt) => bail!("adapt mode needs a pretrained checkpoint (init_checkpoint or --init)"),
        (None, Phase::Pretrain) => {}
    }

    create_dir(out)?;
    let log_path = out.join(LOSS_LOG_FILE);
    let mut log_file = BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    writeln!(log_file, "{LOG_HEADER}")?;
    let meta = |step: usize| -> HashMap<String, String> {
        HashMap::from([
            ("phase".to_string(), mode.to_string()),
            ("modules".to_string(), flags.to_string()),
            ("seed".to_string(), seed.to_string()),
            ("step".to_string(), step.to_string()),
            ("config_hash".to_string(), manifest.config_hash.clone()),
        ])
    };
    let every = config.train.checkpoint_every;
    let steps = config.train.steps(mode);
    let mut io_error = None;
    let history = train_phase(
        &model,
        &source,
        target.as_ref(),
        mode,
        flags,
        &config.train,
        &mut |info| {
            if let Err(e) = writeln!(log_file, "{}", log_line(info.step, info.phase, info.losses)) {
                io_error.get_or_insert(e);
            }
            let done = info.step + 1;
            if done % 50 == 0 || done == steps {
                log::info!("{mode} step {done}/{steps}: total {:.4}", info.losses.total);
            }
            if every > 0 && done % every == 0 && done < steps {
                let dir = out.join("checkpoints");
                fs::create_dir_all(&dir).map_err(|e| tubeshift_model::ModelError::Io {
                    path: dir.display().to_string(),
                    source: e,
                })?;
                info.model.save(&dir.join(format!("step-{done:06}.safetensors")), meta(done))?;
            }
            Ok(())
        },
    )?;
    if let Some(e) = io_error {
        return Err(e).context("writing the loss log");
    }
    log_file.flush()?;
    drop(log_file);

    let checkpoint = out.join(CHECKPOINT_FILE);
    model.save(&checkpoint, meta(steps))?;
    manifest.outputs = vec![
        (CHECKPOINT_FILE.into(), file_sha256(&checkpoint)?),
        (LOSS_LOG_FILE.into(), file_sha256(&log_path)?),
    ];
    manifest.write(out)?;
    Ok(TrainOutcome { checkpoint, history })
}

pub fn load_model(checkpoint: &Path) -> Result<ActionDetector> {
    if !checkpoint.exists() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    let config = ActionDetector::checkpoint_config(checkpoint)?;
    let model = ActionDetector::new(config, 0)?;
    model.load(checkpoint)?;
    Ok(model)
}

/// Detections of `checkpoint` on every frame of the evaluation split.
pub fn detect_split(config: &RunConfig, checkpoint: &Path) -> Result<(LabeledDataset, Vec<Detection>)> {
    let model = load_model(checkpoint)?;
    let dataset = LabeledDataset::open(&config.split(&config.eval_split))?;
    if dataset.videos.is_empty() {
        bail!("no videos in {}", dataset.root.display());
    }
    let dets = data::predict(&model, &dataset.videos, config.train.eval_batch)?;
    Ok((dataset, dets))
}

pub fn score_split(config: &RunConfig, dataset: &LabeledDataset, dets: &[Detection]) -> Result<MetricsReport> {
    let frames: BTreeMap<u32, u32> = dataset.videos.iter().map(|v| (v.video_id, v.len() as u32)).collect();
    Ok(score(
        dets,
        &dataset.annotations,
        &frames,
        dataset.num_classes() as u32,
        &config.eval(),
    )?)
}

/// Runs `checkpoint` on the evaluation split and writes the detection dump,
/// metrics and a readable report to `out`.
pub fn evaluate(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<MetricsReport> {
    config.validate()?;
    let (dataset, dets) = detect_split(config, checkpoint)?;
    let report = score_split(config, &dataset, &dets)?;
    create_dir(out)?;
    textio::write_detections(&out.join(DETECTIONS_FILE), &dets)?;
    fs::write(out.join(METRICS_FILE), report.to_key_value())?;
    fs::write(out.join(REPORT_FILE), report.to_text())?;
    let mut manifest = RunManifest::new("evaluate", config);
    manifest.init_sha256 = Some(file_sha256(checkpoint)?);
    manifest.outputs = [DETECTIONS_FILE, METRICS_FILE]
        .iter()
        .map(|f| Ok((f.to_string(), file_sha256(&out.join(f))?)))
        .collect::<Result<_>>()?;
    manifest.write(out)?;
    Ok(report)
}

/// Error breakdown of a detection dump against the evaluation split.
pub fn analyze_errors(config: &RunConfig, detections: &Path, out: &Path) -> Result<ErrorBreakdown> {
    let dets = textio::read_detections(detections)?;
    let dataset = LabeledDataset::open(&config.split(&config.eval_split))?;
    let e = error_analysis(&dets, &dataset.annotations, config.top_k_error_analysis);
    create_dir(out)?;
    let text = format!(
        "correct={}\nmislocalized={}\nbackground={}\nincorrect={}\nanalyzed={}\n",
        e.correct, e.mislocalized, e.background, e.incorrect, e.analyzed
    );
    fs::write(out.join(ERRORS_FILE), text)?;
    Ok(e)
}
