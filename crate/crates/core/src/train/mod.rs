//! SGD training, augmentation, evaluation and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, mirror, Crop};
pub use checkpoint::{Checkpoint, RngState};
pub use optim::{sgd_step, SgdConfig, SgdState};

use crate::error::{MavrError, Result};
use crate::losses::{self, LossWeights};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Graph, Tensor};
use crate::params::{Binder, ParamStore};
use crate::synth::{ClipMeta, Dataset, Split};
use crate::views::MultiViewClip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Square crop side.
    pub crop: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    /// Serial execution only; output is a pure function of data and config.
    pub deterministic: bool,
    /// Keep the final epoch instead of the best test accuracy.
    pub keep_final: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            epochs: 25,
            lr: 0.01,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-4,
            crop: 64,
            flip_prob: 0.5,
            seed: 0,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            tau: w.tau,
            deterministic: false,
            keep_final: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(MavrError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(MavrError::Config(format!("flip probability {} outside [0,1]", self.flip_prob)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(MavrError::Config("epochs and batch size must be positive".into()));
        }
        if self.crop == 0 || self.crop % 32 != 0 {
            return Err(MavrError::Config(format!("crop {} must be a positive multiple of 32", self.crop)));
        }
        self.loss_weights().validate()?;
        self.model.validate()
    }
}

/// One line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub l_cls: f64,
    pub l_align: f64,
    pub l_att: f64,
}

/// Loss terms and predictions of one forward pass.
struct BatchResult {
    total: f64,
    cls: f64,
    align: f64,
    att: f64,
    predictions: Vec<usize>,
}

/// Stacks the enabled views of `clips` into `[B, C, T, H, W]` tensors.
fn stack(model: &Model, clips: &[MultiViewClip]) -> Vec<Tensor<f32>> {
    model
        .views()
        .into_iter()
        .map(|v| {
            let first = clips[0].view(v).shape().to_vec();
            let mut shape = vec![clips.len()];
            shape.extend_from_slice(&first);
            let mut data = Vec::with_capacity(shape.iter().product());
            for c in clips {
                data.extend_from_slice(c.view(v).data());
            }
            Tensor::new(shape, data).expect("clips share a shape")
        })
        .collect()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Forward pass with the weighted objective; runs backward when `sgd` is given.
fn run_batch(
    model: &Model,
    params: &mut ParamStore<f32>,
    clips: &[MultiViewClip],
    weights: &LossWeights,
    sgd: Option<(&SgdConfig, &mut SgdState)>,
    position: (usize, usize),
) -> Result<BatchResult> {
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let inputs = stack(model, clips);
    let mut g = Graph::<f32>::new();
    let (total, breakdown, logits) = {
        let mut bx = Binder::new(&mut g, params);
        let vars: Vec<_> = inputs.into_iter().map(|t| bx.graph.constant(t)).collect();
        let out = model.forward(&mut bx, &vars, None)?;
        let g = &mut *bx.graph;
        let cls = losses::classification_loss(g, out.logits, &labels)?;
        let align = if weights.lambda1 > 0.0 && out.descriptors.len() > 1 {
            let e = out
                .descriptors
                .iter()
                .map(|&d| losses::view_embedding(g, d))
                .collect::<Result<Vec<_>>>()?;
            losses::alignment_loss(g, &e, weights.tau)?
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let att = match out.attention {
            Some(a) if weights.lambda2 > 0.0 => losses::attention_entropy_loss(g, a)?,
            _ => g.constant(Tensor::scalar(0.0)),
        };
        let (total, breakdown) = losses::total_loss(g, cls, align, att, weights).map_err(|e| match e {
            MavrError::NonFinite { component } => MavrError::NonFiniteLoss {
                component,
                epoch: position.0,
                batch: position.1,
            },
            other => other,
        })?;
        (total, breakdown, out.logits)
    };
    let classes = g.shape(logits)[1];
    let predictions = g.value(logits).data().chunks(classes).map(argmax).collect();
    if let Some((cfg, state)) = sgd {
        g.backward(total)?;
        let grads: Vec<_> = g.param_grads().map(|(id, t)| (crate::params::ParamId(id), t)).collect();
        sgd_step(params, &grads, state, cfg)?;
    }
    Ok(BatchResult {
        total: breakdown.total,
        cls: breakdown.cls,
        align: breakdown.align,
        att: breakdown.att,
        predictions,
    })
}

/// Running sums over an epoch, weighted by batch size.
#[derive(Default)]
struct Tally {
    n: usize,
    correct: usize,
    total: f64,
    cls: f64,
    align: f64,
    att: f64,
}

impl Tally {
    fn add(&mut self, r: &BatchResult, labels: &[usize]) {
        let b = labels.len() as f64;
        self.n += labels.len();
        self.correct += r.predictions.iter().zip(labels).filter(|(p, t)| p == t).count();
        self.total += r.total * b;
        self.cls += r.cls * b;
        self.align += r.align * b;
        self.att += r.att * b;
    }

    fn mean(&self, v: f64) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            v / self.n as f64
        }
    }
}

fn load_batch(dataset: &Dataset, metas: &[&ClipMeta], crop: usize, rng: Option<(&mut ChaCha8Rng, f64)>) -> Result<Vec<MultiViewClip>> {
    let mut rng = rng;
    metas
        .iter()
        .map(|m| {
            let clip = dataset.load(m)?;
            match rng.as_mut() {
                Some((r, flip)) => augment(&clip, crop, Crop::Random { flip_prob: *flip }, Some(&mut **r)),
                None => augment(&clip, crop, Crop::Center, None),
            }
        })
        .collect()
}

/// Outputs of an evaluation pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub loss: f64,
    pub truths: Vec<usize>,
    pub predictions: Vec<usize>,
}

/// Center crop, no flip, argmax per clip.
pub fn evaluate_params(
    model: &Model,
    params: &ParamStore<f32>,
    cfg: &TrainConfig,
    dataset: &Dataset,
    split: Split,
) -> Result<Evaluation> {
    if dataset.classes() != model.config.classes {
        return Err(MavrError::Config(format!(
            "model has {} classes, dataset has {}",
            model.config.classes,
            dataset.classes()
        )));
    }
    let metas = dataset.split(split);
    let mut params = params.clone();
    let mut tally = Tally::default();
    let (mut truths, mut predictions) = (Vec::new(), Vec::new());
    for (i, chunk) in metas.chunks(cfg.batch_size).enumerate() {
        let clips = load_batch(dataset, chunk, cfg.crop, None)?;
        let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
        let r = run_batch(model, &mut params, &clips, &cfg.loss_weights(), None, (0, i))?;
        tally.add(&r, &labels);
        truths.extend(labels);
        predictions.extend(r.predictions);
    }
    let report = compute_metrics(&truths, &predictions, model.config.classes)?;
    Ok(Evaluation {
        report,
        loss: tally.mean(tally.total),
        truths,
        predictions,
    })
}

pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset, split: Split) -> Result<Evaluation> {
    let (model, params) = ckpt.model()?;
    evaluate_params(&model, &params, &ckpt.config, dataset, split)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-test-accuracy (or final) checkpoint.
    pub checkpoint: Checkpoint,
    pub final_checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Trains for `cfg.epochs` or until `on_epoch` returns false. When `out` is
/// given, `epochs.jsonl`, `best.ckpt` and `last.ckpt` are written there.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog) -> bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.classes() != cfg.model.classes {
        return Err(MavrError::Config(format!(
            "config has {} classes, dataset has {}",
            cfg.model.classes,
            dataset.classes()
        )));
    }
    let (model, mut params) = Model::new::<f32>(cfg.model.clone(), cfg.seed)?;
    let mut state = SgdState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let weights = cfg.loss_weights();
    let sgd = cfg.sgd();
    let train_metas = dataset.split(Split::Train);
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| MavrError::io(dir, e))?;
            let path = dir.join("epochs.jsonl");
            Some((fs::File::create(&path).map_err(|e| MavrError::io(&path, e))?, path))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut last = None;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<&ClipMeta> = train_metas.clone();
        order.shuffle(&mut rng);
        let mut tally = Tally::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let clips = load_batch(dataset, chunk, cfg.crop, Some((&mut rng, cfg.flip_prob)))?;
            let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
            let r = run_batch(&model, &mut params, &clips, &weights, Some((&sgd, &mut state)), (epoch, b))?;
            tally.add(&r, &labels);
        }
        let test = evaluate_params(&model, &params, cfg, dataset, Split::Test)?;
        let entry = EpochLog {
            epoch,
            train_loss: tally.mean(tally.total),
            train_acc: tally.mean(tally.correct as f64),
            test_loss: test.loss,
            test_acc: test.report.accuracy,
            l_cls: tally.mean(tally.cls),
            l_align: tally.mean(tally.align),
            l_att: tally.mean(tally.att),
        };
        if let Some((f, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&entry).expect("plain struct");
            writeln!(f, "{line}").map_err(|e| MavrError::io(&*path, e))?;
            f.flush().map_err(|e| MavrError::io(&*path, e))?;
        }
        let ckpt = Checkpoint {
            config: cfg.clone(),
            epoch,
            test_acc: entry.test_acc,
            rng: RngState::capture(&rng),
            params: params.clone(),
            momentum: state.clone(),
        };
        if best.as_ref().map_or(true, |(acc, _)| entry.test_acc > *acc) {
            if let Some(dir) = out {
                ckpt.save(&dir.join("best.ckpt"))?;
            }
            best = Some((entry.test_acc, ckpt.clone()));
        }
        last = Some(ckpt);
        log.push(entry);
        if !on_epoch(log.last().unwrap()) {
            break;
        }
    }
    let last = last.expect("at least one epoch");
    if let Some(dir) = out {
        last.save(&dir.join("last.ckpt"))?;
    }
    let checkpoint = if cfg.keep_final { last.clone() } else { best.expect("at least one epoch").1 };
    Ok(TrainOutcome {
        checkpoint,
        final_checkpoint: last,
        log,
    })
}
