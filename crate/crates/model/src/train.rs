//! Source-only pretraining and mixed-batch adversarial adaptation.
//!
//! Three independent random streams derive from the seed: source clip
//! sampling, target clip sampling, and anchor/ROI sampling inside the
//! detector. Target batches therefore never perturb what the source stream
//! sees.

use std::fmt;
use std::io::Write;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tubeshift_core::synth::{LabeledDataset, UnlabeledDataset, VideoFrames};
use tubeshift_core::{BoundingBox, MapReduction};

use crate::adaptation::{adversarial_losses, AdaptationConfig, LossBundle, ModuleFlags};
use crate::data::clip_batch;
use crate::detector::{ActionDetector, ModelConfig};
use crate::error::{ModelError, Result};

const SOURCE_STREAM: u64 = 0;
const TARGET_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "adapt" => Ok(Phase::Adapt),
            _ => Err(ModelError::Config(format!("unknown mode {s:?}; expected pretrain or adapt"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    AdamW,
    /// SGD with heavy-ball momentum.
    Sgd,
}

/// Flat training configuration. Every field has a default, so a config file
/// only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub pretrain_steps: usize,
    pub adapt_steps: usize,
    pub pretrain_lr: f64,
    pub adapt_lr: f64,
    pub pretrain_optimizer: OptimizerKind,
    pub adapt_optimizer: OptimizerKind,
    pub momentum: f64,
    /// Source clips per step (both phases).
    pub n_s: usize,
    /// Target clips per adaptation step.
    pub n_t: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub map_reduction: MapReduction,
    /// Save a checkpoint every this many steps; 0 saves only the last one.
    pub checkpoint_every: usize,
    pub clip_length: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub sf_channels: usize,
    pub tf1_channels: usize,
    pub tf2_channels: usize,
    pub roi_size: usize,
    pub score_threshold: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = crate::encoders::EncoderConfig::default();
        let adapt = AdaptationConfig::default();
        Self {
            seed: 0,
            pretrain_steps: 600,
            adapt_steps: 400,
            pretrain_lr: 1e-3,
            adapt_lr: 2e-3,
            pretrain_optimizer: OptimizerKind::AdamW,
            adapt_optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            n_s: 4,
            n_t: 4,
            gamma: adapt.gamma,
            lambda: adapt.lambda,
            map_reduction: adapt.map_reduction,
            checkpoint_every: 0,
            clip_length: enc.clip_length,
            spatial_stride: enc.spatial_stride,
            temporal_stride: enc.temporal_stride,
            sf_channels: enc.sf_channels,
            tf1_channels: enc.tf1_channels,
            tf2_channels: enc.tf2_channels,
            roi_size: enc.roi_size,
            score_threshold: crate::detector::HeadConfig::default().score_threshold,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn adaptation(&self) -> AdaptationConfig {
        AdaptationConfig {
            gamma: self.gamma,
            lambda: self.lambda,
            map_reduction: self.map_reduction,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        let mut m = ModelConfig::new(num_classes);
        m.encoder.clip_length = self.clip_length;
        m.encoder.spatial_stride = self.spatial_stride;
        m.encoder.temporal_stride = self.temporal_stride;
        m.encoder.sf_channels = self.sf_channels;
        m.encoder.tf1_channels = self.tf1_channels;
        m.encoder.tf2_channels = self.tf2_channels;
        m.encoder.roi_size = self.roi_size;
        m.head.score_threshold = self.score_threshold;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.adaptation().validate()?;
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("adapt_lr", self.adapt_lr)] {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(ModelError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.n_s == 0 {
            return Err(ModelError::Config("n_s must be at least 1".into()));
        }
        self.model_config(1).validate()
    }

    pub fn steps(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => self.pretrain_steps,
            Phase::Adapt => self.adapt_steps,
        }
    }

    fn learning_rate(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Pretrain => self.pretrain_lr,
            Phase::Adapt => self.adapt_lr,
        }
    }

    fn optimizer(&self, phase: Phase) -> OptimizerKind {
        match phase {
            Phase::Pretrain => self.pretrain_optimizer,
            Phase::Adapt => self.adapt_optimizer,
        }
    }
}

/// Momentum SGD. Like candle's AdamW, vars without a gradient are left alone.
struct MomentumSgd {
    vars: Vec<(Var, Option<Tensor>)>,
    lr: f64,
    momentum: f64,
}

impl MomentumSgd {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, velocity) in &mut self.vars {
            let Some(g) = grads.get(var) else { continue };
            // Detached, or the buffer would keep every step's graph alive.
            let g = g.detach();
            let v = match velocity.take() {
                Some(v) => ((v * self.momentum)? + g)?,
                None => g,
            };
            var.set(&var.sub(&(&v * self.lr)?)?)?;
            *velocity = Some(v);
        }
        Ok(())
    }
}

enum Stepper {
    Adam(AdamW),
    Sgd(MomentumSgd),
}

impl Stepper {
    fn new(kind: OptimizerKind, vars: Vec<Var>, lr: f64, momentum: f64) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::AdamW => Stepper::Adam(AdamW::new(
                vars,
                ParamsAdamW {
                    lr,
                    weight_decay: 0.0,
                    ..Default::default()
                },
            )?),
            OptimizerKind::Sgd => Stepper::Sgd(MomentumSgd {
                vars: vars.into_iter().map(|v| (v, None)).collect(),
                lr,
                momentum,
            }),
        })
    }

    fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Stepper::Adam(o) => Ok(o.step(grads)?),
            Stepper::Sgd(o) => o.step(grads),
        }
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Column order of the loss log.
pub const LOG_HEADER: &str = "step,phase,l_rpn,l_cls,l_reg,l_act,l_ds,l_dtimg,l_dtinst,lambda,total";

/// One loss-log line; floats in shortest round-trip form.
pub fn log_line(step: usize, phase: Phase, b: &LossBundle) -> String {
    let mut s = format!("{step},{phase}");
    for (_, v) in b.components() {
        s.push(',');
        s.push_str(&v.to_string());
    }
    s
}

/// Parses a log line back into its step, phase and bundle.
pub fn parse_log_line(line: &str) -> Result<(usize, Phase, LossBundle)> {
    let bad = || ModelError::Config(format!("malformed loss-log line {line:?}"));
    let f: Vec<&str> = line.trim().split(',').collect();
    if f.len() != 11 {
        return Err(bad());
    }
    let step = f[0].parse().map_err(|_| bad())?;
    let phase = f[1].parse()?;
    let v: Vec<f64> = f[2..].iter().map(|x| x.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
    Ok((
        step,
        phase,
        LossBundle {
            l_rpn: v[0],
            l_cls: v[1],
            l_reg: v[2],
            l_act: v[3],
            l_ds: v[4],
            l_dtimg: v[5],
            l_dtinst: v[6],
            lambda: v[7],
            total: v[8],
        },
    ))
}

/// Everything a step callback may need.
pub struct StepInfo<'a> {
    pub step: usize,
    pub phase: Phase,
    pub losses: &'a LossBundle,
    pub model: &'a ActionDetector,
}

/// A labeled keyframe clip.
struct SourceItem<'a> {
    video: &'a VideoFrames,
    window: Vec<u32>,
    labels: Vec<(BoundingBox, u32)>,
}

struct TargetItem<'a> {
    video: &'a VideoFrames,
    window: Vec<u32>,
}

/// Runs one training phase. `on_step` is called after every optimizer step.
pub fn train_phase(
    model: &ActionDetector,
    source: &LabeledDataset,
    target: Option<&UnlabeledDataset>,
    phase: Phase,
    flags: ModuleFlags,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(StepInfo<'_>) -> Result<()>,
) -> Result<Vec<LossBundle>> {
    config.validate()?;
    let t = model.config().encoder.clip_length;
    let source_items: Vec<SourceItem<'_>> = source
        .clips(t)
        .map(|c| SourceItem {
            video: c.video,
            window: c.window,
            labels: c.labels.iter().map(|g| (g.bbox, g.class_id)).collect(),
        })
        .collect();
    let target_items: Vec<TargetItem<'_>> = match (phase, target) {
        (Phase::Adapt, Some(ds)) => ds
            .clips(t)
            .map(|c| TargetItem {
                video: c.video,
                window: c.window,
            })
            .collect(),
        _ => Vec::new(),
    };
    if source_items.is_empty() {
        return Err(ModelError::MissingDomain {
            n_s: 0,
            n_t: target_items.len(),
        });
    }
    let active = if phase == Phase::Adapt {
        if target_items.is_empty() || config.n_t == 0 {
            return Err(ModelError::MissingDomain {
                n_s: config.n_s,
                n_t: target_items.len().min(config.n_t),
            });
        }
        flags
    } else {
        ModuleFlags::NONE
    };
    let adapt = config.adaptation();
    let lambda = if phase == Phase::Adapt { adapt.lambda } else { 0.0 };

    let mut source_rng = stream_rng(config.seed, SOURCE_STREAM);
    let mut target_rng = stream_rng(config.seed, TARGET_STREAM);
    let mut sampling_rng = stream_rng(config.seed, SAMPLING_STREAM);
    let mut opt = Stepper::new(
        config.optimizer(phase),
        model.params().all_vars(),
        config.learning_rate(phase),
        config.momentum,
    )?;

    let mut history = Vec::with_capacity(config.steps(phase));
    for step in 0..config.steps(phase) {
        let picks: Vec<&SourceItem<'_>> = (0..config.n_s)
            .map(|_| &source_items[source_rng.random_range(0..source_items.len())])
            .collect();
        let target_picks: Vec<&TargetItem<'_>> = if phase == Phase::Adapt {
            (0..config.n_t)
                .map(|_| &target_items[target_rng.random_range(0..target_items.len())])
                .collect()
        } else {
            Vec::new()
        };

        let clips = clip_batch(&picks.iter().map(|p| (p.video, p.window.as_slice())).collect::<Vec<_>>())?;
        let gts: Vec<Vec<(BoundingBox, u32)>> = picks.iter().map(|p| p.labels.clone()).collect();
        let src = model.forward_source(&clips, &gts, &mut sampling_rng)?;
        let det = src.losses.values()?;
        let mut objective = src.losses.total()?;
        let mut adv_values = (0.0, 0.0, 0.0);
        if active.any() {
            let tclips =
                clip_batch(&target_picks.iter().map(|p| (p.video, p.window.as_slice())).collect::<Vec<_>>())?;
            let tgt = model.forward_target(&tclips, active)?;
            let terms = adversarial_losses(model, &src, &tgt, active, &adapt)?;
            adv_values = terms.values()?;
            if let Some(adv) = terms.sum()? {
                objective = (objective + adv)?;
            }
        }
        let bundle = LossBundle::new(det, adv_values.0, adv_values.1, adv_values.2, lambda);
        if let Some(component) = bundle.non_finite() {
            return Err(ModelError::NonFiniteLoss { component, step });
        }
        let grads: GradStore = objective.backward()?;
        opt.step(&grads)?;
        history.push(bundle);
        on_step(StepInfo {
            step,
            phase,
            losses: &bundle,
            model,
        })?;
    }
    Ok(history)
}

/// Source-only training on one fixed batch; returns `L_act` before each step.
pub fn fit_batch(
    model: &ActionDetector,
    clips: &candle_core::Tensor,
    gts: &[Vec<(BoundingBox, u32)>],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, SAMPLING_STREAM);
    let mut opt = AdamW::new(
        model.params().all_vars(),
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let out = model.forward_source(clips, gts, &mut rng)?;
        let det = out.losses.values()?;
        if !det.l_act.is_finite() {
            return Err(ModelError::NonFiniteLoss { component: "l_act", step });
        }
        history.push(det.l_act);
        opt.backward_step(&out.losses.total()?)?;
    }
    Ok(history)
}

/// Writes a loss log (header plus one line per step).
pub fn write_log<W: Write>(out: &mut W, phase: Phase, history: &[LossBundle]) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for (i, b) in history.iter().enumerate() {
        writeln!(out, "{}", log_line(i, phase, b))?;
    }
    Ok(())
}
