//! Training loop, learning-rate schedule and per-epoch record.

use std::time::Instant;

use image::RgbImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, augment, AugmentationPolicy, ImageSample, Label, TestCaseSplit};
use crate::error::{Error, Result};
use crate::model::{pool, pool_backward, ClassifierModel, Regime};
use crate::nn::loss::{cross_entropy_with_logits, softmax};
use crate::nn::{Grads, Optimizer, OptimizerKind, ParamStore, Tensor};
use crate::scalar::Scalar;

/// A classifier after [`train`]; the same type, named for intent.
pub type TrainedClassifier<T> = ClassifierModel<T>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` uses the backbone's registry default.
    pub lr: Option<f64>,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub lr_patience: usize,
    pub lr_factor: f64,
    /// `None` means a hundredth of the initial rate.
    pub min_lr: Option<f64>,
    /// Smallest decrease of the validation loss that counts as improvement.
    pub min_delta: f64,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    /// `None` uses the backbone's registry optimizer.
    pub optimizer: Option<OptimizerKind>,
    /// Keep the parameters of the epoch with the lowest validation loss.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: None,
            batch_size: 8,
            val_fraction: 0.2,
            lr_patience: 5,
            lr_factor: 0.5,
            min_lr: None,
            min_delta: 1e-4,
            seed: 0,
            augmentation: AugmentationPolicy::default(),
            optimizer: None,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor {} outside (0, 1)", self.lr_factor)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        Ok(())
    }
}

/// Shrinks the learning rate once the monitored loss has failed to improve
/// for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
    best: f64,
    wait: usize,
    lr: f64,
}

impl ReduceLrOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, min_delta: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
            lr,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn wait(&self) -> usize {
        self.wait
    }

    /// Feeds one epoch's loss and returns the rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                if self.lr > self.min_lr {
                    self.lr = (self.lr * self.factor).max(self.min_lr);
                }
                self.wait = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub backbone: String,
    pub regime: Regime,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub wall_time_seconds: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub hardware: String,
}

impl TrainRecord {
    pub fn final_train_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_acc)
    }

    pub fn best_train_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max)
    }
}

pub fn hardware_note() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{} {} cpu, {threads} threads", std::env::consts::OS, std::env::consts::ARCH)
}

/// Stratified hold-out: a `fraction` of each label, at least one sample of a
/// label when it has two or more, never the last one.
pub fn stratified_holdout(
    samples: &[ImageSample],
    fraction: f64,
    seed: u64,
) -> (Vec<ImageSample>, Vec<ImageSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for label in Label::BOTH {
        let mut group: Vec<_> = samples.iter().filter(|s| s.label == label).cloned().collect();
        group.sort();
        group.shuffle(&mut rng);
        let n = group.len();
        let k = if n < 2 {
            0
        } else {
            ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
        };
        held.extend(group.drain(..k));
        keep.extend(group);
    }
    (keep, held)
}

/// Decoded patches at the model's input resolution.
pub struct PatchSet {
    pub images: Vec<RgbImage>,
    pub labels: Vec<Label>,
}

impl PatchSet {
    pub fn load(samples: &[ImageSample], size: u32) -> Result<Self> {
        let images = samples
            .iter()
            .map(|s| s.load().map(|img| dataset::resize_to(&img, size)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn batch_tensor<T: Scalar>(model: &ClassifierModel<T>, images: &[RgbImage]) -> Result<Tensor<T>> {
    model.prepare_batch(images)
}

fn correct<T: Scalar>(logits: &Array2<T>, targets: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(targets)
        .filter(|(row, &t)| {
            let pred = if row[1] > row[0] { 1 } else { 0 };
            pred == t
        })
        .count()
}

/// Mean loss and accuracy of the model in inference mode.
pub fn score<T: Scalar>(model: &ClassifierModel<T>, set: &PatchSet, batch_size: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    for (imgs, labels) in set.images.chunks(batch_size).zip(set.labels.chunks(batch_size)) {
        let x = batch_tensor(model, imgs)?;
        let logits = model.head.logits(&pool(&model.features(&x)?));
        let targets: Vec<usize> = labels.iter().map(|&l| model.head_index(l)).collect();
        let (l, _) = cross_entropy_with_logits(&logits, &targets);
        loss += l.to_f64_lossy() * imgs.len() as f64;
        let probs = softmax(&logits);
        hits += correct(&probs, &targets);
    }
    Ok((loss / set.len() as f64, hits as f64 / set.len() as f64))
}

/// Loss, correct count and gradients of one batch.
pub struct BatchGrads<T> {
    pub loss: T,
    pub correct: usize,
    /// `None` when the backbone is frozen.
    pub backbone: Option<Grads<T>>,
    pub head: Grads<T>,
}

/// Forward and backward pass over a preprocessed batch; batch statistics are
/// used (and running statistics updated) only when the backbone trains.
pub fn loss_and_grads<T: Scalar>(
    model: &mut ClassifierModel<T>,
    x: &Tensor<T>,
    targets: &[usize],
) -> Result<BatchGrads<T>> {
    let scratch = model.regime() == Regime::Scratch;
    let (tape, features) = if scratch {
        let tape = model.backbone.forward_train(x)?;
        let f = tape.output().clone();
        (Some(tape), f)
    } else {
        (None, model.backbone.forward(x)?)
    };
    let pooled = pool(&features);
    let logits = model.head.logits(&pooled);
    let (loss, dlogits) = cross_entropy_with_logits(&logits, targets);
    let mut head = Grads::for_store(&model.head.params);
    let dpooled = model.head.backward(&pooled, &dlogits, &mut head);
    let backbone = match tape {
        Some(tape) => {
            let mut grads = Grads::for_store(&model.backbone.params);
            model
                .backbone
                .backward(&tape, pool_backward(&dpooled, features.dim()), &mut grads)?;
            Some(grads)
        }
        None => None,
    };
    Ok(BatchGrads {
        loss,
        correct: correct(&logits, targets),
        backbone,
        head,
    })
}

fn step<T: Scalar>(
    model: &mut ClassifierModel<T>,
    x: &Tensor<T>,
    targets: &[usize],
    opts: &mut [Box<dyn Optimizer<T>>; 2],
    lr: f64,
) -> Result<(f64, usize)> {
    let g = loss_and_grads(model, x, targets)?;
    if let Some(grads) = &g.backbone {
        opts[0].step(&mut model.backbone.params, grads, lr);
    }
    opts[1].step(&mut model.head.params, &g.head, lr);
    Ok((g.loss.to_f64_lossy(), g.correct))
}

/// Trains `model` on the split's training side; the validation set is carved
/// out of it, the test side is never read.
pub fn train<T: Scalar>(
    model: ClassifierModel<T>,
    split: &TestCaseSplit,
    config: &TrainConfig,
) -> Result<(TrainedClassifier<T>, TrainRecord)> {
    let (fit, val) = stratified_holdout(&split.train, config.val_fraction, config.seed);
    let size = model.input_size() as u32;
    let fit = PatchSet::load(&fit, size)?;
    let val = PatchSet::load(&val, size)?;
    train_on(model, &fit, &val, config)
}

/// Training loop over already decoded patches.
pub fn train_on<T: Scalar>(
    mut model: ClassifierModel<T>,
    fit: &PatchSet,
    val: &PatchSet,
    config: &TrainConfig,
) -> Result<(TrainedClassifier<T>, TrainRecord)> {
    config.validate()?;
    for label in Label::BOTH {
        if !fit.labels.contains(&label) {
            return Err(Error::Precondition(format!("training set has no {label} samples")));
        }
    }
    let spec = model.backbone_kind().spec();
    let lr0 = config.lr.unwrap_or(spec.default_lr);
    let kind = config.optimizer.unwrap_or(spec.optimizer);
    let mut opts = [kind.build::<T>(), kind.build::<T>()];
    let mut schedule = ReduceLrOnPlateau::new(
        lr0,
        config.lr_factor,
        config.lr_patience,
        config.min_lr.unwrap_or(lr0 / 100.0),
        config.min_delta,
    );
    let start = Instant::now();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>, ParamStore<T>)> = None;
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(7);

    for epoch in 1..=config.epochs {
        let lr = schedule.lr();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let imgs: Vec<RgbImage> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = config.augmentation.rng_for(epoch, i);
                    augment(&fit.images[i], &config.augmentation, &mut rng)
                })
                .collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| model.head_index(fit.labels[i])).collect();
            let x = batch_tensor(&model, &imgs)?;
            let (loss, h) = step(&mut model, &x, &targets, &mut opts, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss} at lr {lr:e}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            hits += h;
        }
        let train_loss = loss_sum / fit.len() as f64;
        let train_acc = hits as f64 / fit.len() as f64;
        let (val_loss, val_acc) = if val.is_empty() {
            (train_loss, train_acc)
        } else {
            score(&model, val, config.batch_size)?
        };
        log::info!(
            "epoch {epoch}/{}: loss {train_loss:.4} acc {train_acc:.3} val_loss {val_loss:.4} val_acc {val_acc:.3} lr {lr:.2e}",
            config.epochs
        );
        epochs.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lr,
        });
        if config.restore_best && best.as_ref().is_none_or(|(l, ..)| val_loss < *l) {
            best = Some((val_loss, epoch, model.backbone.params.clone(), model.head.params.clone()));
        }
        schedule.step(val_loss);
    }

    let mut best_epoch = config.epochs;
    if let Some((_, epoch, backbone, head)) = best {
        model.backbone.params.assign_from(&backbone)?;
        model.head.params.assign_from(&head)?;
        best_epoch = epoch;
    }
    let record = TrainRecord {
        backbone: model.backbone_kind().name().into(),
        regime: model.regime(),
        optimizer: kind,
        seed: config.seed,
        epochs,
        best_epoch,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        train_samples: fit.len(),
        val_samples: val.len(),
        hardware: hardware_note(),
    };
    Ok((model, record))
}
