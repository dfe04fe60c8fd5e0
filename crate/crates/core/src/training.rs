//! Adam, plateau scheduling, early stopping and the mini-batch loop.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamSet, Tensor};
use crate::imbalance::{self, ImbalanceError, ResampleConfig};
use crate::models::{Architecture, ModelError, ModelInstance, Mode};
use crate::preprocess::{FeatureMatrix, SYNTHETIC_PLOT};
use crate::rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// A validation loss must beat the best by more than this to count.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {param} at step {step}")]
    NonFiniteGradient { param: usize, step: u64 },
    #[error("training needs at least 2 classes, found {0}")]
    TooFewClasses(usize),
    #[error("training needs at least 2 rows, found {0}")]
    TooFewRows(usize),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("{0} gradients for {1} parameters")]
    GradientCount(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Imbalance(#[from] ImbalanceError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub lr_floor: f64,
    pub early_stop_patience: usize,
    /// Share of plots per class held out to monitor the loss.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 4096,
            max_epochs: 1000,
            plateau_patience: 20,
            plateau_factor: 0.5,
            lr_floor: 1e-6,
            early_stop_patience: 40,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults with the architecture's learning rate.
    pub fn for_arch(arch: &Architecture) -> Self {
        let learning_rate = match arch {
            Architecture::Mlp { .. } => 1e-4,
            _ => 1e-3,
        };
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 (batch norm)");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patiences must be at least 1");
        }
        if !(self.lr_floor >= 0.0) {
            return bad("learning-rate floor must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update. Parameters are untouched when any
/// gradient is non-finite.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.len() != state.m.len() {
        return Err(TrainError::GradientCount(grads.len(), state.m.len()));
    }
    if let Some(param) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::NonFiniteGradient { param, step: state.t + 1 });
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..g.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Reduce-on-plateau plus early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheduler {
    pub lr: f64,
    pub best: f64,
    /// Non-improving epochs since the last improvement or LR cut.
    pub lr_wait: usize,
    /// Non-improving epochs since the last improvement.
    pub stop_wait: usize,
    patience: usize,
    factor: f64,
    floor: f64,
    stop_patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerStep {
    pub lr: f64,
    pub improved: bool,
    pub stop: bool,
}

impl Scheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate.max(cfg.lr_floor),
            best: f64::INFINITY,
            lr_wait: 0,
            stop_wait: 0,
            patience: cfg.plateau_patience,
            factor: cfg.plateau_factor,
            floor: cfg.lr_floor,
            stop_patience: cfg.early_stop_patience,
        }
    }

    pub fn update(&mut self, val_loss: f64) -> SchedulerStep {
        let improved = val_loss < self.best - IMPROVEMENT_TOL;
        if improved {
            self.best = val_loss;
            self.lr_wait = 0;
            self.stop_wait = 0;
        } else {
            self.lr_wait += 1;
            self.stop_wait += 1;
            if self.lr_wait >= self.patience {
                self.lr = (self.lr * self.factor).max(self.floor);
                self.lr_wait = 0;
            }
        }
        SchedulerStep { lr: self.lr, improved, stop: self.stop_wait >= self.stop_patience }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Last epoch run (0 when none).
    pub stop_epoch: usize,
    /// Epoch whose parameters were restored (0 = initial parameters).
    pub best_epoch: usize,
    pub early_stopped: bool,
    pub train_rows: usize,
    pub val_rows: usize,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Epoch log; wall time is left out so equal runs give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.lr);
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "epochs={} best_epoch={} early_stopped={} train_rows={} val_rows={}",
            self.stop_epoch, self.best_epoch, self.early_stopped, self.train_rows, self.val_rows
        )
    }
}

/// Weighted mean cross-entropy; rows whose class weight is 0 are skipped.
pub fn weighted_ce_value(logits: &Tensor, labels: &[usize], class_weights: &[f64]) -> Option<f64> {
    let k = logits.shape[1];
    let (mut num, mut den) = (0.0, 0.0);
    for (row, &y) in logits.data.chunks(k).zip(labels) {
        let w = class_weights[y];
        if w <= 0.0 {
            continue;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        num += w * (lse - row[y]);
        den += w;
    }
    (den > 0.0).then(|| num / den)
}

/// Plot-level stratified split: returns (train rows, validation rows).
/// Each class with at least 2 plots sends `round(fraction * plots)` of them,
/// at least 1 and never all, to validation. Synthetic rows stay in training.
pub fn internal_split(m: &FeatureMatrix, n_classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut per_class: Vec<BTreeSet<u64>> = vec![BTreeSet::new(); n_classes];
    for (&p, &l) in m.plot_ids.iter().zip(&m.labels) {
        if p != SYNTHETIC_PLOT {
            per_class[l].insert(p);
        }
    }
    let mut r = rng::stream(seed, rng::tag::TRAIN_SPLIT);
    let mut val_plots: BTreeSet<u64> = BTreeSet::new();
    if fraction > 0.0 {
        for (c, plots) in per_class.iter().enumerate() {
            let mut ids: Vec<u64> = plots.iter().copied().collect();
            if ids.len() < 2 {
                if !ids.is_empty() {
                    log::warn!("class {c} has a single plot and is absent from the validation split");
                }
                continue;
            }
            ids.shuffle(&mut r);
            let n_val = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
            val_plots.extend(&ids[..n_val]);
        }
    }
    (0..m.n_rows).partition(|&i| m.plot_ids[i] == SYNTHETIC_PLOT || !val_plots.contains(&m.plot_ids[i]))
}

/// Row batches of one epoch; a trailing batch shorter than 2 rows is dropped.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|b| b.len() >= 2).collect()
}

/// Trains `model` in place and restores the parameters of the epoch with the
/// lowest monitored loss.
pub fn train(
    model: &mut ModelInstance,
    data: &FeatureMatrix,
    cfg: &TrainConfig,
    resample: &ResampleConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let k = model.config.n_classes;
    let present = imbalance::class_counts(&data.labels, k).iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(TrainError::TooFewClasses(present));
    }
    let (train_rows, val_rows) = internal_split(data, k, cfg.val_fraction, cfg.seed);
    let val = data.select_rows(&val_rows);
    let val_present: Vec<bool> = {
        let c = imbalance::class_counts(&val.labels, k);
        c.iter().map(|&n| n > 0).collect()
    };
    if !val_rows.is_empty() && val_present.iter().any(|p| !p) {
        log::warn!("some classes are absent from the internal validation split");
    }
    let resample = ResampleConfig { seed: rng::derive_seed(cfg.seed, resample.seed), ..resample.clone() };
    let fit = imbalance::apply(&data.select_rows(&train_rows), k, &resample)?;
    let train_set = fit.matrix;
    let weights = fit.class_weights;
    // The monitor sees the natural class mix; weights only shape the training loss.
    let uniform = vec![1.0; k];
    if train_set.n_rows < 2 {
        return Err(TrainError::TooFewRows(train_set.n_rows));
    }
    log::info!("training on {} rows, validating on {} rows", train_set.n_rows, val.n_rows);

    let mut report = TrainReport { train_rows: train_set.n_rows, val_rows: val.n_rows, ..Default::default() };
    let mut adam = AdamState::new(&model.params);
    let mut sched = Scheduler::new(cfg);
    let mut shuffle_rng = rng::stream(cfg.seed, rng::tag::TRAIN_SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.n_rows).collect();
    let mut best_params = model.params.clone();
    model.set_mode(Mode::Train);

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr;
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut rows_seen) = (0.0, 0usize);
        for batch in batches(&order, cfg.batch_size) {
            let x = train_set.batch_tensor(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let mut g = Graph::new();
            let pass = model.forward_graph(&mut g, &x, Mode::Train)?;
            let loss = g.weighted_cross_entropy(pass.logits, &labels, &weights)?;
            let mut grads = g.backward(loss);
            let grads: Vec<Vec<f64>> = pass.param_vars.iter().map(|&v| grads.take(v)).collect();
            adam_step(model.params.params_mut(), &grads, &mut adam, lr)?;
            model.apply_moments(&pass.moments);
            loss_sum += g.value(loss).data[0] * batch.len() as f64;
            rows_seen += batch.len();
        }
        let train_loss = loss_sum / rows_seen.max(1) as f64;
        let val_loss = if val.n_rows > 0 {
            let logits = model.logits_matrix(&val)?;
            weighted_ce_value(&logits, &val.labels, &uniform).unwrap_or(train_loss)
        } else {
            train_loss
        };
        let step = sched.update(val_loss);
        report.epochs.push(EpochRecord { epoch, train_loss, val_loss, lr });
        report.stop_epoch = epoch;
        if step.improved {
            report.best_epoch = epoch;
            best_params = model.params.clone();
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:e}");
        if step.stop {
            report.early_stopped = true;
            break;
        }
    }
    if report.stop_epoch > 0 {
        model.params = best_params;
    }
    model.set_mode(Mode::Eval);
    report.wall_time_secs = started.elapsed().as_secs_f64();
    log::info!("{} ({:.1}s)", report.summary(), report.wall_time_secs);
    Ok(report)
}
