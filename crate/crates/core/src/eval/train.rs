//! Mini-batch Adam training with early stopping, evaluation and the
//! majority-class baseline.

use log::debug;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::nn::layers::{softmax_cross_entropy_slice, Mode};
use crate::nn::model::{forward, loss_and_gradients, ForwardCache, Gradients, ModelParams};
use crate::nn::ModelSpec;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Consecutive epochs without a strictly lower validation loss before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch norm)".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("learning rate must be >= 0 and betas in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_manifest(&self, m: &mut Manifest) {
        m.set("max_epochs", self.max_epochs)
            .set("patience", self.patience)
            .set("batch_size", self.batch_size)
            .set("learning_rate", self.learning_rate)
            .set("beta1", self.beta1)
            .set("beta2", self.beta2)
            .set("adam_eps", self.adam_eps)
            .set("val_fraction", self.val_fraction)
            .set("train_seed", self.seed);
    }
}

/// Adam state for every trainable tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f32>> = params.trainable().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = (cfg.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (cfg.adam_eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((p, g), m), v) in params
            .trainable_mut()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Patience bookkeeping, separate from training so it can be checked alone.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since: 0,
        }
    }

    /// Records the validation loss of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.since = 0;
            Verdict::Improved
        } else {
            self.since += 1;
            if self.since >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Wait
            }
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Copies the inputs of `indices` back to back into `buf`.
fn gather(ds: &LabeledDataset, indices: &[usize], single_frame: bool, buf: &mut Vec<f32>, labels: &mut Vec<usize>) {
    buf.clear();
    labels.clear();
    for &i in indices {
        let r = &ds.records()[i];
        buf.extend_from_slice(ds.input(r, single_frame));
        labels.push(r.class_index());
    }
}

/// Batch boundaries; a trailing batch of one joins its predecessor
/// because train-mode batch norm needs two rows.
fn batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

const EVAL_BATCH: usize = 64;

/// Mean cross-entropy and predicted classes of `indices`, in inference mode.
pub fn predict(
    spec: &ModelSpec,
    params: &ModelParams,
    ds: &LabeledDataset,
    indices: &[usize],
) -> Result<(f64, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::InsufficientData("no records to evaluate".into()));
    }
    let single = spec.name.single_frame();
    let mut cache = ForwardCache::new();
    let (mut buf, mut labels) = (Vec::new(), Vec::new());
    let mut total = 0.0f64;
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        gather(ds, chunk, single, &mut buf, &mut labels);
        forward(spec, params, &buf, chunk.len(), Mode::Infer, &mut cache)?;
        let mut dl = vec![0.0f32; cache.logits().len()];
        let l = softmax_cross_entropy_slice(cache.logits(), spec.num_classes, &labels, &mut dl)?;
        total += l as f64 * chunk.len() as f64;
        preds.extend(cache.predictions(spec.num_classes));
    }
    Ok((total / indices.len() as f64, preds))
}

/// Fraction of `indices` whose argmax logit equals the label.
pub fn evaluate(spec: &ModelSpec, params: &ModelParams, ds: &LabeledDataset, indices: &[usize]) -> Result<f64> {
    let (_, preds) = predict(spec, params, ds, indices)?;
    let correct = indices
        .iter()
        .zip(&preds)
        .filter(|(&i, &p)| ds.records()[i].class_index() == p)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Accuracy of always predicting the training majority class (ties: Low).
pub fn baseline_majority(ds: &LabeledDataset, train: &[usize], test: &[usize]) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData("baseline needs train and test records".into()));
    }
    let high = |idx: &[usize]| idx.iter().filter(|&&i| ds.records()[i].class_index() == 1).count();
    let train_high = high(train);
    let majority = usize::from(train_high * 2 > train.len());
    let test_high = high(test);
    let hits = if majority == 1 { test_high } else { test.len() - test_high };
    Ok(hits as f64 / test.len() as f64)
}

/// Trains from a fresh initialization drawn from `rng`. After every epoch
/// the validation loss is measured in inference mode; the parameters of
/// the best epoch are returned.
pub fn train_model(
    spec: &ModelSpec,
    ds: &LabeledDataset,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(ModelParams, TrainingCurve)> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} training and {} validation records",
            train.len(),
            val.len()
        )));
    }
    let single = spec.name.single_frame();
    let mut params = ModelParams::init(spec, &mut rng.derive(1))?;
    let mut shuffle_rng = rng.derive(2);
    let mut adam = Adam::new(&params);
    let mut grads = Gradients::zeros_like(&params);
    let mut cache = ForwardCache::new();
    let (mut buf, mut labels) = (Vec::new(), Vec::new());
    let mut order = train.to_vec();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sum = 0.0f64;
        for range in batches(order.len(), cfg.batch_size) {
            gather(ds, &order[range.clone()], single, &mut buf, &mut labels);
            let l = loss_and_gradients(spec, &params, &buf, &labels, &mut cache, &mut grads)?;
            if !l.is_finite() {
                return Err(Error::TrainingFailure { epoch });
            }
            sum += l as f64 * range.len() as f64;
            adam.update(&mut params, &grads, cfg);
            params.absorb_batch_stats(&cache);
        }
        let train_loss = sum / order.len() as f64;
        let (val_loss, _) = predict(spec, &params, ds, val)?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingFailure { epoch });
        }
        debug!("epoch {epoch}: train {train_loss:.4} val {val_loss:.4}");
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best.clone_from(&params),
            Verdict::Wait => {}
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss) = stopper.best();
    Ok((
        best,
        TrainingCurve {
            epochs,
            best_epoch,
            best_val_loss,
            stopped_early,
        },
    ))
}
