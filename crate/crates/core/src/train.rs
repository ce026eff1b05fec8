//! Step-decay schedule, Adam and the training loop.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchIter, DatasetSplit};
use crate::error::{invalid, Error, Result};
use crate::linalg::Real;
use crate::metrics::{evaluate, MetricsAccumulator};
use crate::models::{ModelGraph, ModelKind};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::AugmentConfig;

/// `lr0 · drop_rate^floor(epoch / epoch_drop)`.
pub fn step_decay(lr0: f64, epoch: usize, drop_rate: f64, epoch_drop: usize) -> f64 {
    let drops = epoch / epoch_drop.max(1);
    lr0 * drop_rate.powi(drops as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub drop_rate: f64,
    pub epoch_drop: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_model(ModelKind::A)
    }
}

impl TrainConfig {
    pub fn for_model(kind: ModelKind) -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr0: kind.default_lr0(),
            drop_rate: 0.5,
            epoch_drop: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }

    /// Checks every field; `epochs = 0` is allowed and trains nothing.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(invalid(format!(
                "lr0 must be finite and non-negative, got {}",
                self.lr0
            )));
        }
        if !(self.drop_rate > 0.0 && self.drop_rate <= 1.0) {
            return Err(invalid(format!("drop_rate must be in (0, 1], got {}", self.drop_rate)));
        }
        if self.epoch_drop == 0 {
            return Err(invalid("epoch_drop must be at least 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return Err(invalid(format!(
                "adam_epsilon must be positive, got {}",
                self.adam_epsilon
            )));
        }
        self.augment.validate()
    }

    pub fn adam(&self) -> Adam {
        Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per named parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl Adam {
    /// One bias-corrected update of every parameter that has a gradient.
    /// Gradients are checked for finiteness before anything is modified.
    pub fn step<T: Real>(
        &self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &BTreeMap<String, Tensor<T>>,
        state: &mut AdamState<T>,
        lr: f64,
    ) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| invalid(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return Err(invalid(format!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        state.t += 1;
        let t = state.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let c1 = T::of(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::of(1.0 / (1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::of(lr), T::of(self.epsilon));
        for (name, p) in params.iter_mut() {
            let g = &grads[name.as_str()];
            let m = state.m.entry(name.clone()).or_insert_with(|| g.zeros_like());
            let v = state.v.entry(name.clone()).or_insert_with(|| g.zeros_like());
            let rows = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in rows {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mhat = *m * c1;
                let vhat = *v * c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: f64,
    pub val_top1: f64,
    pub val_top3: f64,
}

fn batch_rng(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6472_6f70_6f75_7421);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng
}

/// Trains `model` in place on `split.train`, validating on `split.test`
/// after every epoch. `on_epoch` sees each record as it is produced.
pub fn fit<T: Real>(
    model: &mut ModelGraph<T>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if split.classes() != model.classes() {
        return Err(invalid(format!(
            "split has {} classes, model {}",
            split.classes(),
            model.classes()
        )));
    }
    let adam = cfg.adam();
    let mut state = AdamState::default();
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = step_decay(cfg.lr0, epoch, cfg.drop_rate, cfg.epoch_drop);
        let mut train_acc = MetricsAccumulator::new(model.classes())?;
        let batches = BatchIter::new(&split.train, cfg.batch_size, cfg.augment, cfg.seed, epoch)?;
        for (bi, batch) in batches.enumerate() {
            if batch.len() < 2 {
                // batch statistics are undefined for a single sample
                log::debug!("epoch {epoch}: skipping a trailing batch of one");
                continue;
            }
            let mut tape = Tape::new();
            let x = tape.constant(batch.images.cast::<T>());
            let logits = model.forward_train(&mut tape, x, &mut batch_rng(cfg.seed, epoch, bi))?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let loss_value = tape.value(loss)?.item()?.to_f64_lossy();
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {bi}: loss is {loss_value} at learning rate {lr}"
                )));
            }
            train_acc.add(&tape.cross_entropy_probs(loss)?, &batch.labels)?;
            let grads = tape.backward(loss)?.into_params();
            drop(tape);
            let mut params = model.graph_mut().params_mut();
            adam.step(&mut params, &grads, &mut state, lr)?;
        }
        let train = train_acc.finish(&split.class_names)?;
        let val = evaluate(&*model, &split.test, &split.class_names, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: train.loss,
            train_top1: train.top1,
            val_loss: val.loss,
            val_top1: val.top1,
            val_top3: val.top3,
        };
        on_epoch(&record);
        curves.push(record);
    }
    Ok(curves)
}
