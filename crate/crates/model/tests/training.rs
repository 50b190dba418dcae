use std::collections::HashMap;
use std::path::Path;

use candle_core::Tensor;
use tubeshift_core::synth::{generate, DomainSpec, GenerationConfig, LabeledDataset, UnlabeledDataset};
use tubeshift_model::{
    train_phase, ActionDetector, LossBundle, ModelError, ModuleFlags, OptimizerKind, Phase, TrainConfig,
};

fn corpus(dir: &Path, spec: DomainSpec) -> LabeledDataset {
    let g = GenerationConfig {
        num_videos: 4,
        video_length: 10,
        ..GenerationConfig::default()
    };
    generate(&spec, &g, dir).unwrap();
    LabeledDataset::open(dir).unwrap()
}

fn config(steps: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        pretrain_steps: steps,
        adapt_steps: steps,
        adapt_lr: 1e-3,
        n_s: 2,
        n_t: 2,
        lambda,
        ..TrainConfig::default()
    }
}

fn run(
    model: &ActionDetector,
    source: &LabeledDataset,
    target: Option<&UnlabeledDataset>,
    phase: Phase,
    flags: ModuleFlags,
    cfg: &TrainConfig,
) -> tubeshift_model::Result<Vec<LossBundle>> {
    train_phase(model, source, target, phase, flags, cfg, &mut |_| Ok(()))
}

struct Fixture {
    _dir: tempfile::TempDir,
    source: LabeledDataset,
    target: UnlabeledDataset,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let source = corpus(&dir.path().join("s"), DomainSpec::default_source());
    corpus(&dir.path().join("t"), DomainSpec::default_target());
    let target = UnlabeledDataset::open(&dir.path().join("t")).unwrap();
    Fixture {
        _dir: dir,
        source,
        target,
    }
}

fn source_columns(h: &[LossBundle]) -> Vec<[f64; 4]> {
    h.iter().map(|b| [b.l_rpn, b.l_cls, b.l_reg, b.l_act]).collect()
}

#[test]
fn zero_lambda_adaptation_matches_source_only_continuation() {
    let f = fixture();
    let cfg = config(4, 0.0);
    let a = ActionDetector::new(cfg.model_config(4), 3).unwrap();
    let b = ActionDetector::new(cfg.model_config(4), 3).unwrap();
    let adapted = run(&a, &f.source, Some(&f.target), Phase::Adapt, ModuleFlags::ALL, &cfg).unwrap();
    let plain = run(&b, &f.source, Some(&f.target), Phase::Adapt, ModuleFlags::NONE, &cfg).unwrap();
    assert_eq!(source_columns(&adapted), source_columns(&plain));
    assert!(adapted.iter().any(|x| x.l_ds > 0.0 && x.l_dtimg > 0.0));
    assert!(adapted.iter().all(|x| x.total == x.l_act));
    // the feature extractors saw nothing from the discriminators
    let features = |m: &ActionDetector| {
        let mut s = m.params().snapshot("sf.").unwrap();
        s.extend(m.params().snapshot("tf1.").unwrap());
        s.extend(m.params().snapshot("tf2.").unwrap());
        s
    };
    assert_eq!(features(&a), features(&b));
}

#[test]
fn pretrain_and_flagless_adaptation_share_the_source_stream() {
    let f = fixture();
    let cfg = TrainConfig {
        pretrain_lr: 1e-3,
        adapt_optimizer: OptimizerKind::AdamW,
        ..config(3, 0.1)
    };
    let a = ActionDetector::new(cfg.model_config(4), 5).unwrap();
    let b = ActionDetector::new(cfg.model_config(4), 5).unwrap();
    let pre = run(&a, &f.source, None, Phase::Pretrain, ModuleFlags::ALL, &cfg).unwrap();
    let adapt = run(&b, &f.source, Some(&f.target), Phase::Adapt, ModuleFlags::NONE, &cfg).unwrap();
    assert_eq!(source_columns(&pre), source_columns(&adapt));
    assert!(pre.iter().all(|x| x.lambda == 0.0 && x.l_ds == 0.0));
}

#[test]
fn disabled_modules_stay_frozen_and_silent() {
    let f = fixture();
    let cfg = config(3, 0.5);
    let model = ActionDetector::new(cfg.model_config(4), 1).unwrap();
    let before_timg = model.params().snapshot("d_timg.").unwrap();
    let before_tinst = model.params().snapshot("d_tinst.").unwrap();
    let before_s = model.params().snapshot("d_s.").unwrap();
    let flags: ModuleFlags = "Simg".parse().unwrap();
    let h = run(&model, &f.source, Some(&f.target), Phase::Adapt, flags, &cfg).unwrap();
    assert!(h.iter().all(|b| b.l_dtimg == 0.0 && b.l_dtinst == 0.0 && b.l_ds > 0.0));
    assert_eq!(model.params().snapshot("d_timg.").unwrap(), before_timg);
    assert_eq!(model.params().snapshot("d_tinst.").unwrap(), before_tinst);
    assert_ne!(model.params().snapshot("d_s.").unwrap(), before_s);
}

#[test]
fn same_seed_same_trajectory() {
    let f = fixture();
    let cfg = config(3, 0.1);
    let go = || {
        let m = ActionDetector::new(cfg.model_config(4), 9).unwrap();
        run(&m, &f.source, Some(&f.target), Phase::Adapt, ModuleFlags::ALL, &cfg).unwrap()
    };
    let (a, b) = (go(), go());
    let bits = |h: &[LossBundle]| -> Vec<u64> {
        h.iter().flat_map(|x| x.components().map(|(_, v)| v.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn adaptation_without_target_is_refused() {
    let f = fixture();
    let cfg = config(1, 0.1);
    let model = ActionDetector::new(cfg.model_config(4), 0).unwrap();
    let err = run(&model, &f.source, None, Phase::Adapt, ModuleFlags::ALL, &cfg).unwrap_err();
    assert!(matches!(err, ModelError::MissingDomain { .. }), "{err}");
    let empty = UnlabeledDataset::open(&f._dir.path().join("nothing")).unwrap();
    let err = run(&model, &f.source, Some(&empty), Phase::Adapt, ModuleFlags::ALL, &cfg).unwrap_err();
    assert!(matches!(err, ModelError::MissingDomain { .. }), "{err}");
}

#[test]
fn nan_parameters_abort_with_the_component_named() {
    let f = fixture();
    let cfg = config(2, 0.1);
    let model = ActionDetector::new(cfg.model_config(4), 0).unwrap();
    let w = model.params().get("head.cls.weight").unwrap();
    w.set(&Tensor::full(f32::NAN, w.shape(), w.device()).unwrap()).unwrap();
    let err = run(&model, &f.source, None, Phase::Pretrain, ModuleFlags::NONE, &cfg).unwrap_err();
    match err {
        ModelError::NonFiniteLoss { component, step } => {
            assert_eq!(component, "l_cls");
            assert_eq!(step, 0);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn checkpoints_round_trip_and_reject_other_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let cfg = TrainConfig::default();
    let a = ActionDetector::new(cfg.model_config(4), 1).unwrap();
    a.save(&path, HashMap::from([("note".to_string(), "x".to_string())])).unwrap();

    let b = ActionDetector::new(cfg.model_config(4), 2).unwrap();
    assert_ne!(a.params().snapshot("").unwrap(), b.params().snapshot("").unwrap());
    let meta = b.load(&path).unwrap();
    assert_eq!(meta["note"], "x");
    assert_eq!(a.params().snapshot("").unwrap(), b.params().snapshot("").unwrap());
    assert_eq!(ActionDetector::checkpoint_config(&path).unwrap(), *a.config());

    let wider = TrainConfig {
        tf1_channels: 48,
        ..TrainConfig::default()
    };
    let c = ActionDetector::new(wider.model_config(4), 1).unwrap();
    assert!(matches!(c.load(&path), Err(ModelError::Checkpoint { .. })));
    let fewer = ActionDetector::new(cfg.model_config(3), 1).unwrap();
    assert!(fewer.load(&path).is_err());
    assert!(b.load(&dir.path().join("missing.safetensors")).is_err());
}
