use std::sync::OnceLock;

use mavr_core::model::{ModelConfig, ViewKind};
use mavr_core::numerics::Tensor;
use mavr_core::synth::{build_dataset, Dataset, DatasetConfig, Split};
use mavr_core::train::augment::{augment, mirror, Crop};
use mavr_core::train::{evaluate, evaluate_params, train, Checkpoint, TrainConfig};
use mavr_core::MavrError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Corpus {
    _dir: tempfile::TempDir,
    dataset: Dataset,
}

fn corpus() -> &'static Dataset {
    static C: OnceLock<Corpus> = OnceLock::new();
    &C.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_per_class_per_scale: 3,
            frame_size: 40,
            seed: 5,
            ..DatasetConfig::default()
        };
        build_dataset(dir.path(), &cfg, 1).unwrap();
        let dataset = Dataset::open(dir.path()).unwrap();
        Corpus { _dir: dir, dataset }
    })
    .dataset
}

fn tiny() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 6,
        crop: 32,
        seed: 3,
        model: ModelConfig {
            base_width: 4,
            pyramid_width: 4,
            heads: 2,
            norm_groups: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn mirror_is_an_involution_and_negates_horizontal_flow() {
    let ds = corpus();
    let clip = ds.load(ds.split(Split::Train)[0]).unwrap();
    let m = mirror(&clip);
    assert_eq!(mirror(&m), clip);
    let (t, h, w) = (16, 40, 40);
    for f in [0, 7, 15] {
        for y in [0, 13, 39] {
            for x in [0, 21, 39] {
                let src = (f * h + y) * w + x;
                let dst = (f * h + y) * w + (w - 1 - x);
                assert_eq!(m.flow.data()[dst], -clip.flow.data()[src]);
                assert_eq!(m.flow.data()[t * h * w + dst], clip.flow.data()[t * h * w + src]);
                assert_eq!(m.mask.data()[dst], clip.mask.data()[src]);
                assert_eq!(m.rgb.data()[dst], clip.rgb.data()[src]);
            }
        }
    }
}

#[test]
fn center_crop_takes_the_middle_window() {
    let ds = corpus();
    let clip = ds.load(ds.split(Split::Test)[0]).unwrap();
    let c = augment(&clip, 32, Crop::Center, None).unwrap();
    assert_eq!(c.rgb.shape(), &[3, 16, 32, 32]);
    assert_eq!(c.flow.shape(), &[2, 16, 32, 32]);
    assert_eq!(c.mask.shape(), &[1, 16, 32, 32]);
    for (y, x) in [(0, 0), (31, 31), (10, 20)] {
        assert_eq!(c.rgb.data()[y * 32 + x], clip.rgb.data()[(y + 4) * 40 + x + 4]);
    }
    assert!(augment(&clip, 64, Crop::Center, None).is_err());
    assert!(augment(&clip, 32, Crop::Random { flip_prob: 0.5 }, None).is_err());
}

#[test]
fn random_crop_is_shared_across_views() {
    let ds = corpus();
    let clip = ds.load(ds.split(Split::Train)[1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..8 {
        let a = augment(&clip, 32, Crop::Random { flip_prob: 0.5 }, Some(&mut rng)).unwrap();
        // locate the rgb window in the full clip, then check flow and mask agree
        let found = (0..=8).flat_map(|y| (0..=8).map(move |x| (y, x))).flat_map(|(y, x)| [(y, x, false), (y, x, true)]).find(|&(y, x, flip)| {
            let plain = mirror_if(&clip.rgb, flip);
            let x0 = if flip { 8 - x } else { x };
            window(&plain, y, x0) == a.rgb.data()[..32 * 32]
        });
        let (y, x, flip) = found.expect("crop window not found");
        let x0 = if flip { 8 - x } else { x };
        let full = if flip { mirror(&clip) } else { clip.clone() };
        assert_eq!(window(&full.mask, y, x0), a.mask.data()[..32 * 32]);
        assert_eq!(window(&full.flow, y, x0), a.flow.data()[..32 * 32]);
    }
}

fn mirror_if(x: &Tensor<f32>, flip: bool) -> Tensor<f32> {
    if !flip {
        return x.clone();
    }
    let s = x.shape().to_vec();
    let w = s[3];
    Tensor::from_fn(&s, |i| x.data()[i - i % w + (w - 1 - i % w)])
}

fn window(x: &Tensor<f32>, y0: usize, x0: usize) -> Vec<f32> {
    let w = x.shape()[3];
    (0..32).flat_map(|y| (0..32).map(move |xx| (y, xx))).map(|(y, xx)| x.data()[(y0 + y) * w + x0 + xx]).collect()
}

#[test]
fn fresh_model_with_zeroed_output_layer_is_uniform() {
    let ds = corpus();
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..tiny()
    };
    let (model, mut params) = mavr_core::model::Model::new::<f32>(cfg.model.clone(), cfg.seed).unwrap();
    let untouched = evaluate_params(&model, &params, &cfg, ds, Split::Test).unwrap();
    assert!((untouched.loss - 4f64.ln()).abs() < 0.1, "initial loss {}", untouched.loss);
    let w = params.by_name("classifier.out.weight").unwrap().shape().to_vec();
    params.set("classifier.out.weight", Tensor::zeros(&w)).unwrap();
    let e = evaluate_params(&model, &params, &cfg, ds, Split::Test).unwrap();
    assert!((e.loss - 4f64.ln()).abs() < 1e-6, "loss {}", e.loss);
    assert!(e.predictions.iter().all(|&p| p == 0));
    assert_eq!(e.report.accuracy, 0.25);
}

#[test]
fn identical_runs_produce_identical_logs_and_checkpoints() {
    let ds = corpus();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(ds, &tiny(), Some(a.path()), |_| true).unwrap();
    let rb = train(ds, &tiny(), Some(b.path()), |_| true).unwrap();
    assert_eq!(ra.log, rb.log);
    assert_eq!(ra.log.len(), 2);
    for name in ["epochs.jsonl", "best.ckpt", "last.ckpt"] {
        let (x, y) = (std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        assert_eq!(x, y, "{name} differs");
    }
    assert!(ra.log.iter().all(|e| e.train_loss.is_finite() && e.l_align > 0.0));

    let other = train(ds, &TrainConfig { seed: 4, ..tiny() }, None, |_| true).unwrap();
    assert_ne!(other.log, ra.log);
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let ds = corpus();
    let dir = tempfile::tempdir().unwrap();
    let out = train(ds, &TrainConfig { epochs: 1, ..tiny() }, Some(dir.path()), |_| true).unwrap();
    let path = dir.path().join("last.ckpt");
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.final_checkpoint);
    let again = dir.path().join("again.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let direct = evaluate(&out.final_checkpoint, ds, Split::Test).unwrap();
    let reloaded = evaluate(&loaded, ds, Split::Test).unwrap();
    assert_eq!(direct.report, reloaded.report);
    assert_eq!(direct.loss, reloaded.loss);
    assert_eq!(direct.report.accuracy, out.log[0].test_acc);
    assert_eq!(direct.loss, out.log[0].test_loss);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    match Checkpoint::load(&bad) {
        Err(MavrError::Format { path, .. }) => assert_eq!(path, bad),
        other => panic!("expected format error, got {other:?}"),
    }
    let truncated = dir.path().join("short.ckpt");
    let full = std::fs::read(&path).unwrap();
    std::fs::write(&truncated, &full[..full.len() - 3]).unwrap();
    assert!(Checkpoint::load(&truncated).is_err());
}

#[test]
fn best_and_final_selection_and_early_stop() {
    let ds = corpus();
    let cfg = TrainConfig { epochs: 3, ..tiny() };
    let mut seen = 0;
    let out = train(ds, &cfg, None, |_| {
        seen += 1;
        seen < 2
    })
    .unwrap();
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.final_checkpoint.epoch, 2);
    let best = out.log.iter().map(|e| e.test_acc).fold(f64::MIN, f64::max);
    assert_eq!(out.checkpoint.test_acc, best);
    let first_best = out.log.iter().find(|e| e.test_acc == best).unwrap().epoch;
    assert_eq!(out.checkpoint.epoch, first_best);

    let kept = train(ds, &TrainConfig { epochs: 1, keep_final: true, ..tiny() }, None, |_| true).unwrap();
    assert_eq!(kept.checkpoint, kept.final_checkpoint);
}

#[test]
fn class_count_mismatch_is_rejected() {
    let ds = corpus();
    let mut cfg = tiny();
    cfg.model.classes = 3;
    assert!(matches!(train(ds, &cfg, None, |_| true), Err(MavrError::Config(_))));
    let (model, params) = mavr_core::model::Model::new::<f32>(cfg.model.clone(), 0).unwrap();
    assert!(matches!(
        evaluate_params(&model, &params, &cfg, ds, Split::Test),
        Err(MavrError::Config(_))
    ));
}

#[test]
fn divergence_aborts_with_position() {
    let ds = corpus();
    let cfg = TrainConfig {
        lr: 1e30,
        momentum: 0.0,
        ..tiny()
    };
    match train(ds, &cfg, None, |_| true) {
        Err(MavrError::NonFiniteLoss { epoch, batch, component }) => {
            assert_eq!(epoch, 1);
            assert!(batch >= 1, "first batch runs before any update");
            let msg = MavrError::NonFiniteLoss { component, epoch, batch }.to_string();
            assert!(msg.contains(&format!("batch {batch}")));
        }
        other => panic!("expected non-finite abort, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn single_view_and_ablated_models_train() {
    let ds = corpus();
    let mut cfg = TrainConfig { epochs: 1, ..tiny() };
    cfg.model.views = vec![ViewKind::Flow];
    let out = train(ds, &cfg, None, |_| true).unwrap();
    assert_eq!(out.log[0].l_align, 0.0);
    let mut cfg = TrainConfig { epochs: 1, ..tiny() };
    cfg.model.use_attention = false;
    cfg.model.use_pyramid = false;
    let out = train(ds, &cfg, None, |_| true).unwrap();
    assert_eq!(out.log[0].l_att, 0.0);
    assert!(out.log[0].l_align > 0.0);
}

#[test]
fn config_files_reject_unknown_keys() {
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "lr_typo": 0.1}"#).is_err());
    let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    assert!(TrainConfig { crop: 48, ..tiny() }.validate().is_err());
}
