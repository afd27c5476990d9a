//! Adam optimisation with cosine learning-rate annealing, and evaluation.
//!
//! Samples of a batch are processed in parallel, each on its own tape; their
//! gradients are summed in sample order so results do not depend on thread
//! scheduling.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Graph};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::metrics::{f1_per_class, iou_per_class, oa, ConfusionMatrix};
use crate::network::{argmax_classes, Model};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            min_lr: 1e-6,
            epochs: 50,
            batch: 2,
            schedule: Schedule::Cosine,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config(format!("learning rates must satisfy 0 <= min_lr <= lr, got {} / {}", self.min_lr, self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0,1) and eps must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch)
    }

    /// Learning rate at optimisation step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let frac = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
                self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * frac.min(1.0)).cos())
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies the gradients stored in `store` and leaves them untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let ids: Vec<ParamId> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// One training example as network inputs.
#[derive(Clone, Debug)]
pub struct Example<T: Scalar> {
    pub id: String,
    pub optical: Tensor<T>,
    pub dsm: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> Example<T> {
    pub fn from_sample(id: impl Into<String>, s: &SceneSample) -> Self {
        let (optical, dsm) = s.model_inputs();
        Self {
            id: id.into(),
            optical,
            dsm,
            labels: s.labels.clone(),
        }
    }
}

/// Loss and parameter gradients of one example.
pub fn example_gradients<T: Scalar>(model: &Model, store: &ParamStore<T>, ex: &Example<T>) -> Result<(f64, Vec<(ParamId, Tensor<T>)>)> {
    let g = Graph::new();
    let cx = Ctx::new(&g, store);
    let out = model.forward(&cx, g.constant(ex.optical.clone()), g.constant(ex.dsm.clone()))?;
    let loss = model.loss(&out, &ex.labels)?;
    if loss.all_ignored {
        log::warn!("example {} has only ignored pixels", ex.id);
    }
    let value = loss.loss.value().item().as_f64();
    let grads = g.backward(loss.loss)?;
    Ok((value, grads.param_grads().map(|(p, t)| (p, t.clone())).collect()))
}

/// Mean loss over `batch`, with the mean gradient written into `store`.
pub fn batch_gradients<T: Scalar>(model: &Model, store: &mut ParamStore<T>, batch: &[&Example<T>]) -> Result<f64> {
    let results: Vec<Result<(f64, Vec<(ParamId, Tensor<T>)>)>> = {
        let shared: &ParamStore<T> = store;
        batch.par_iter().map(|ex| example_gradients(model, shared, ex)).collect()
    };
    store.zero_grad();
    let scale = T::one() / T::from_usize_lossy(batch.len());
    let mut total = 0.0;
    for (r, ex) in results.into_iter().zip(batch) {
        let (loss, grads) = r?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {loss} on example {}", ex.id)));
        }
        total += loss;
        for (p, g) in grads {
            store.accumulate_grad(p, &g.scale(scale));
        }
    }
    Ok(total / batch.len() as f64)
}

/// Confusion matrix of the model's predictions over `examples`.
pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, examples: &[Example<T>]) -> Result<ConfusionMatrix> {
    let preds: Vec<Result<Vec<u8>>> = examples
        .par_iter()
        .map(|ex| Ok(argmax_classes(&model.predict_logits(store, &ex.optical, &ex.dsm)?)))
        .collect();
    let mut cm = ConfusionMatrix::new(model.cfg.num_classes);
    for (p, ex) in preds.into_iter().zip(examples) {
        cm.accumulate(&p?, &ex.labels)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub oa: Option<f64>,
    pub miou: Option<f64>,
    pub mean_f1: Option<f64>,
}

impl EvalSummary {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let fin = |v: f64| v.is_finite().then_some(v);
        Self {
            oa: oa(cm).ok(),
            miou: fin(iou_per_class(cm).1),
            mean_f1: fin(f1_per_class(cm).1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub train_loss: f64,
    pub steps: u64,
    pub val: Option<EvalSummary>,
}

/// Trains in place. `on_epoch` sees every record after it is complete and
/// may stop training early by returning `false`.
pub fn train<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore<T>) -> Result<bool>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let steps_per_epoch = cfg.steps_per_epoch(train_set.len());
    let total = steps_per_epoch * cfg.epochs;
    let mut adam = Adam::new(store, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr0 = cfg.lr_at(adam.steps() as usize, total);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = batch_gradients(model, store, &batch).map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("epoch {epoch}, batch {b}: {m}")),
                e => e,
            })?;
            let lr = cfg.lr_at(adam.steps() as usize, total);
            adam.step(store, lr);
            loss_sum += loss;
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(EvalSummary::from_confusion(&evaluate(model, store, val_set)?))
        };
        let rec = EpochRecord {
            epoch,
            lr: lr0,
            train_loss: loss_sum / steps_per_epoch as f64,
            steps: adam.steps(),
            val,
        };
        log::info!("epoch {epoch}: loss {:.5} lr {:.3e}", rec.train_loss, rec.lr);
        let keep_going = on_epoch(&rec, store)?;
        history.push(rec);
        if !keep_going {
            break;
        }
    }
    Ok(history)
}
