//! Masked-loss minibatch training with Adam, global-norm clipping and early
//! stopping on validation MAE.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evaluation::{compute_metrics, predict, Condition, MetricReport};
use crate::features::{ForecastSample, Normalizer};
use crate::model::{Model, ModelParams};
use crate::tensor::{ExprGraph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

/// Sum of masked absolute (or squared) errors; divide by the observed count
/// for the mean.
pub fn masked_error_sum(g: &mut ExprGraph, pred: Var, target: Var, mask: Var, kind: LossKind) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let err = match kind {
        LossKind::Mae => g.abs(diff),
        LossKind::Mse => g.mul(diff, diff)?,
    };
    let err = g.mul(err, mask)?;
    Ok(g.sum(err))
}

/// Mean error over the cells where `mask` is 1; 0 when nothing is observed.
pub fn masked_loss(g: &mut ExprGraph, pred: Var, target: Var, mask: &Tensor, kind: LossKind) -> Result<Var> {
    let count = mask.sum();
    let mask = g.constant(mask.clone());
    let total = masked_error_sum(g, pred, target, mask, kind)?;
    Ok(g.scale(total, 1.0 / count.max(1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub early_stop_patience: usize,
    pub loss: LossKind,
    /// Parameters held at their initial value.
    pub frozen: Vec<String>,
    /// Stop once an epoch's mean training loss falls below this.
    pub target_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(5.0),
            seed: 0,
            early_stop_patience: 20,
            loss: LossKind::Mae,
            frozen: Vec::new(),
            target_train_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Parameter(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Parameter("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Parameter(format!("clip norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Adam moments for every trainable tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of the tensors named in `grads`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let Some(p) = params.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut data = p.to_vec();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            let shape = p.shape().to_vec();
            params.insert(name.clone(), Tensor::from_parts(shape, data));
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (normalized units).
    pub train_loss: f64,
    /// Validation metrics in MPH over all forecast steps.
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: Option<f64>,
    /// Gradient norm of the last batch, before clipping.
    pub grad_norm: f64,
    /// Kept out of serialized histories so that reruns compare bit for bit.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Equality ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        let strip = |h: &TrainHistory| {
            let mut h = h.clone();
            h.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
            h
        };
        strip(self) == strip(other)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation MAE.
    pub params: ModelParams,
    pub history: TrainHistory,
}

/// Per-sample error sum and gradients, seeded with `scale`.
fn sample_gradients(
    model: &Model,
    params: &ModelParams,
    sample: &ForecastSample,
    g_op: &Tensor,
    kind: LossKind,
    scale: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = ExprGraph::new();
    let pred = model.build(&mut g, sample, g_op)?;
    g.set_scope("loss");
    let target = g.constant(sample.target.clone());
    let mask = g.constant(sample.mask.clone());
    let loss = masked_error_sum(&mut g, pred, target, mask, kind)?;
    g.evaluate(params)?;
    let value = g.value(loss)?.item()?;
    let grads = g.backward(loss, &Tensor::scalar(scale))?;
    Ok((value, grads.into_inner()))
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    /// Coordinates whose probes crossed a `relu`/`abs` kink.
    pub kinked: usize,
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Denominator floor of the relative error, so that gradients near zero are
/// compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Checks every coordinate of every parameter: `|a - n| / max(|a|, |n|, floor)`
/// where `n` is the central difference of the masked mean loss with step `h`.
/// Coordinates whose `x ± h` probes change the kink pattern are skipped.
pub fn gradient_check(
    model: &Model,
    params: &ModelParams,
    sample: &ForecastSample,
    g_op: &Tensor,
    kind: LossKind,
    h: f64,
) -> Result<GradientCheck> {
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = ExprGraph::new();
    let pred = model.build(&mut g, sample, g_op)?;
    g.set_scope("loss");
    let target = g.constant(sample.target.clone());
    let loss = masked_loss(&mut g, pred, target, &sample.mask, kind)?;
    g.evaluate(params)?;
    let base_pattern = g.kink_pattern()?;
    let analytic = g.backward(loss, &Tensor::scalar(1.0))?;

    let mut probe = params.clone();
    let mut out = GradientCheck {
        checked: 0,
        kinked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (name, value) in params.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Structural(format!("no gradient for `{name}`")))?;
        let mut data = value.to_vec();
        for i in 0..data.len() {
            let x = data[i];
            let mut at = |v: f64, data: &mut Vec<f64>| -> Result<(f64, bool)> {
                data[i] = v;
                probe.insert(name.clone(), Tensor::new(value.shape(), data.clone())?);
                g.evaluate(&probe)?;
                Ok((g.value(loss)?.item()?, g.kink_pattern()? == base_pattern))
            };
            let (plus, smooth_plus) = at(x + h, &mut data)?;
            let (minus, smooth_minus) = at(x - h, &mut data)?;
            data[i] = x;
            if !(smooth_plus && smooth_minus) {
                out.kinked += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            out.checked += 1;
            if out.worst.is_none() || rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = Some((name.clone(), i));
            }
        }
        probe.insert(name.clone(), value.clone());
    }
    Ok(out)
}

/// Metrics in MPH of `samples` over every forecast step.
pub fn validation_metrics(
    model: &Model,
    params: &ModelParams,
    samples: &[ForecastSample],
    g_op: &Tensor,
    normalizer: Normalizer,
) -> Result<MetricReport> {
    let preds = predict(model, params, samples, g_op)?;
    let (mut p, mut t, mut m) = (Vec::new(), Vec::new(), Vec::new());
    for (pred, s) in preds.iter().zip(samples) {
        p.extend(pred.data().iter().map(|&v| normalizer.denormalize(v)));
        t.extend(s.target.data().iter().map(|&v| normalizer.denormalize(v)));
        m.extend_from_slice(s.mask.data());
    }
    Ok(compute_metrics(&p, &t, &m)?.with(model.config.horizon, Condition::All))
}

/// Trains from `init`. Each epoch visits the training samples once in a
/// seeded shuffle; per-sample gradients are computed in parallel and summed
/// in sample order, so results do not depend on the thread count.
pub fn train(
    model: &Model,
    init: ModelParams,
    train_set: &[ForecastSample],
    val_set: &[ForecastSample],
    g_op: &Tensor,
    normalizer: Normalizer,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.check_params(&init)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Degenerate(format!(
            "training needs samples in both splits (train {}, validation {})",
            train_set.len(),
            val_set.len()
        )));
    }
    if let Some(name) = config.frozen.iter().find(|n| init.get(n).is_none()) {
        return Err(Error::Parameter(format!("cannot freeze unknown parameter `{name}`")));
    }
    let trainable: Vec<String> = init.names().filter(|n| !config.frozen.contains(n)).cloned().collect();

    let mut params = init;
    let mut adam = Adam::new(config.beta1, config.beta2, config.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;
    let mut stale = 0usize;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_count, mut last_norm) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let count: f64 = batch.iter().map(|&i| train_set[i].mask.sum()).sum();
            if count == 0.0 {
                continue;
            }
            let current = &params;
            let results: Vec<(f64, BTreeMap<String, Tensor>)> = batch
                .par_iter()
                .map(|&i| sample_gradients(model, current, &train_set[i], g_op, config.loss, 1.0 / count))
                .collect::<Result<_>>()?;
            let mut grads: BTreeMap<String, Vec<f64>> = trainable
                .iter()
                .map(|n| (n.clone(), vec![0.0; params.get(n).map_or(0, Tensor::len)]))
                .collect();
            let mut batch_loss = 0.0;
            for (loss, sample_grads) in &results {
                batch_loss += loss;
                for (name, g) in sample_grads {
                    if let Some(acc) = grads.get_mut(name) {
                        acc.iter_mut().zip(g.data()).for_each(|(a, x)| *a += x);
                    }
                }
            }
            if !batch_loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite loss or gradient at epoch {epoch}, batch {b}")));
            }
            last_norm = match config.grad_clip {
                Some(c) => clip_global_norm(&mut grads, c),
                None => grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt(),
            };
            adam.step(&mut params, &grads, config.learning_rate);
            loss_sum += batch_loss;
            loss_count += count;
        }
        let train_loss = loss_sum / loss_count.max(1.0);
        let val = validation_metrics(model, &params, val_set, g_op, normalizer)?;
        let val_mae = val
            .mae
            .ok_or_else(|| Error::Degenerate("validation split has no observed targets".into()))?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_mae,
            val_rmse: val.rmse.unwrap_or(val_mae),
            val_mape: val.mape,
            grad_norm: last_norm,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_loss:.5} val MAE {val_mae:.3} MPH |g| {last_norm:.3}");

        if best.as_ref().is_none_or(|(b, _)| val_mae < *b) {
            best = Some((val_mae, params.clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        if config.target_train_loss.is_some_and(|t| train_loss < t) || stale >= config.early_stop_patience.max(1) {
            history.stopped_early = epoch + 1 < config.epochs;
            break;
        }
    }

    let params = best.map_or(params, |(_, p)| p);
    Ok(TrainOutcome { params, history })
}
