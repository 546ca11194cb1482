//! RMSE training with a phased learning-rate schedule, the Ranger and Adam
//! optimisers, and leave-one-year-out cross-validation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::datapipe::{augment_chip, Chip, Dataset, Dihedral};
use crate::error::{Error, Result};
use crate::infer::predict_chips;
use crate::metrics::{compute_metrics, MetricReport};
use crate::model::{ArchSpec, ModelKind, Network};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::{CHIP_SIZE, N_BANDS, SEQ_LEN};

const HW: usize = CHIP_SIZE * CHIP_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Ranger,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Year withheld for validation by [`train_fold`]; `run_cv` sets it.
    pub leave_out_year: Option<i32>,
    pub lr_schedule: Vec<Phase>,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub augment: bool,
    pub model: ModelKind,
    pub hidden: usize,
    pub width: usize,
    /// Stops after this many optimiser steps, mid-epoch if needed.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            leave_out_year: None,
            lr_schedule: vec![Phase { epochs: 20, lr: 1e-3 }, Phase { epochs: 5, lr: 1e-4 }, Phase { epochs: 5, lr: 1e-5 }],
            batch_size: 16,
            optimizer: OptimizerKind::Ranger,
            seed: 0,
            augment: true,
            model: ModelKind::Fusion,
            hidden: ArchSpec::DEFAULT_HIDDEN,
            width: ArchSpec::DEFAULT_WIDTH,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_schedule.is_empty() {
            return Err(Error::invalid("learning-rate schedule is empty"));
        }
        for (i, p) in self.lr_schedule.iter().enumerate() {
            if p.epochs == 0 {
                return Err(Error::invalid(format!("phase {i} has zero epochs")));
            }
            if !(p.lr > 0.0) || !p.lr.is_finite() {
                return Err(Error::invalid(format!("phase {i} learning rate {} is not positive", p.lr)));
            }
            if i > 0 && p.lr >= self.lr_schedule[i - 1].lr {
                return Err(Error::invalid("learning rates must strictly decrease across phases"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.arch().validate()
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec { kind: self.model, width: self.width, hidden: if self.model == ModelKind::Fusion { self.hidden } else { 0 } }
    }

    pub fn total_epochs(&self) -> usize {
        self.lr_schedule.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate of a 0-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let mut e = epoch;
        for p in &self.lr_schedule {
            if e < p.epochs {
                return p.lr;
            }
            e -= p.epochs;
        }
        self.lr_schedule.last().map_or(0.0, |p| p.lr)
    }
}

/// RAdam and lookahead constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangerParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub n_sma_threshold: f64,
    /// Lookahead sync period; `None` disables lookahead.
    pub k: Option<usize>,
    pub alpha: f64,
}

impl Default for RangerParams {
    fn default() -> Self {
        RangerParams { beta1: 0.95, beta2: 0.999, eps: 1e-5, n_sma_threshold: 5.0, k: Some(6), alpha: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerConfig {
    Ranger(RangerParams),
    Adam(AdamParams),
}

impl From<OptimizerKind> for OptimizerConfig {
    fn from(k: OptimizerKind) -> Self {
        match k {
            OptimizerKind::Ranger => OptimizerConfig::Ranger(RangerParams::default()),
            OptimizerKind::Adam => OptimizerConfig::Adam(AdamParams::default()),
        }
    }
}

/// Moment buffers, lookahead slow weights and the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub slow: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).numel()]).collect();
        let slow = store.ids().map(|id| store.value(id).data().to_vec()).collect();
        OptimizerState { config, step: 0, m: zeros.clone(), v: zeros, slow }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {lr} must be positive")));
        }
        if self.m.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match the parameter set"));
        }
        self.step += 1;
        let t = self.step as f64;
        match self.config {
            OptimizerConfig::Adam(p) => {
                let bc1 = 1.0 - p.beta1.powf(t);
                let bc2 = 1.0 - p.beta2.powf(t);
                for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                    let (value, grad) = store.value_and_grad_mut(id);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (k, (x, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[k] = p.beta1 * m[k] + (1.0 - p.beta1) * g;
                        v[k] = p.beta2 * v[k] + (1.0 - p.beta2) * g * g;
                        *x -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + p.eps);
                    }
                }
            }
            OptimizerConfig::Ranger(p) => {
                let b2t = p.beta2.powf(t);
                let bc1 = 1.0 - p.beta1.powf(t);
                let n_sma_max = 2.0 / (1.0 - p.beta2) - 1.0;
                let n_sma = n_sma_max - 2.0 * t * b2t / (1.0 - b2t);
                let rectified = n_sma > p.n_sma_threshold;
                let step_size = if rectified {
                    lr * ((1.0 - b2t) * (n_sma - 4.0) / (n_sma_max - 4.0) * (n_sma - 2.0) / n_sma * n_sma_max
                        / (n_sma_max - 2.0))
                        .sqrt()
                        / bc1
                } else {
                    lr / bc1
                };
                for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                    let (value, grad) = store.value_and_grad_mut(id);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (k, (x, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[k] = p.beta1 * m[k] + (1.0 - p.beta1) * g;
                        v[k] = p.beta2 * v[k] + (1.0 - p.beta2) * g * g;
                        if rectified {
                            *x -= step_size * m[k] / (v[k].sqrt() + p.eps);
                        } else {
                            *x -= step_size * m[k];
                        }
                    }
                }
                if let Some(k) = p.k {
                    if self.step % k as u64 == 0 {
                        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
                            let fast = store.value_mut(id).data_mut();
                            for (s, f) in self.slow[i].iter_mut().zip(fast.iter_mut()) {
                                *s += p.alpha * (*f - *s);
                                *f = *s;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Batch input for `kind`: the full `B×10×10×32×32` sequence for the fusion
/// model, the time-t stack `B×10×32×32` for the baseline.
pub fn batch_input(kind: ModelKind, chips: &[&Chip]) -> Tensor {
    let step = N_BANDS * HW;
    let mut data = Vec::with_capacity(chips.len() * SEQ_LEN * step);
    for c in chips {
        let src = match kind {
            ModelKind::Fusion => &c.features[..],
            ModelKind::Baseline => c.step(SEQ_LEN - 1),
        };
        data.extend(src.iter().map(|&v| v as f64));
    }
    let shape = match kind {
        ModelKind::Fusion => vec![chips.len(), SEQ_LEN, N_BANDS, CHIP_SIZE, CHIP_SIZE],
        ModelKind::Baseline => vec![chips.len(), N_BANDS, CHIP_SIZE, CHIP_SIZE],
    };
    Tensor::new(shape, data).expect("batch layout")
}

pub fn batch_target(chips: &[&Chip]) -> Tensor {
    let data = chips.iter().flat_map(|c| c.target.iter().map(|&v| v as f64)).collect();
    Tensor::new(vec![chips.len(), CHIP_SIZE, CHIP_SIZE], data).expect("target layout")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase_lr: f64,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub wall_seconds: f64,
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// A trained network with its training record.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<EpochLog>,
    /// Learning rate applied at every optimiser step.
    pub lr_trace: Vec<f64>,
    /// Training-mode batch RMSE of every step.
    pub step_losses: Vec<f64>,
    /// Samples that contributed gradients, per year.
    pub gradient_samples: BTreeMap<i32, usize>,
}

/// Mean per-batch inference RMSE over `ids`.
pub fn evaluate_rmse(net: &mut Network, chips: &[Chip], ids: &[usize], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for group in ids.chunks(batch.max(1)) {
        let refs: Vec<&Chip> = group.iter().map(|&i| &chips[i]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(batch_input(net.kind(), &refs));
        let y = net.forward(&mut tape, x, false)?;
        let t = tape.constant(batch_target(&refs));
        let loss = tape.rmse(y, t)?;
        total += tape.value(loss).data()[0];
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

/// Trains a fresh network on `train_ids`, validating on `val_ids` after
/// every epoch.
pub fn fit(config: &TrainConfig, chips: &[Chip], train_ids: &[usize], val_ids: &[usize]) -> Result<TrainOutcome> {
    config.validate()?;
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::invalid("training and validation splits must both be non-empty"));
    }
    let mut net = Network::new(&config.arch(), config.seed)?;
    let mut opt = OptimizerState::new(config.optimizer.into(), net.store());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1_u64);
    let mut order = train_ids.to_vec();
    let mut out = TrainOutcome {
        network: net.clone(),
        log: Vec::new(),
        lr_trace: Vec::new(),
        step_losses: Vec::new(),
        gradient_samples: BTreeMap::new(),
    };
    let start = Instant::now();
    'epochs: for epoch in 0..config.total_epochs() {
        let lr = config.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        for group in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| out.lr_trace.len() >= m) {
                break;
            }
            let augmented: Vec<Chip> = group
                .iter()
                .map(|&i| {
                    let g = if config.augment { Dihedral::new(rng.random_range(0..8)).expect("index < 8") } else { Dihedral::IDENTITY };
                    augment_chip(&chips[i], g)
                })
                .collect();
            let refs: Vec<&Chip> = augmented.iter().collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_input(net.kind(), &refs));
            let y = net.forward(&mut tape, x, true)?;
            let t = tape.constant(batch_target(&refs));
            let loss = tape.rmse(y, t)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::InvalidData(format!("non-finite loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            net.store_mut().zero_grad();
            grads.accumulate_into(net.store_mut());
            opt.step(net.store_mut(), lr)?;
            for c in &refs {
                *out.gradient_samples.entry(c.year).or_insert(0) += 1;
            }
            out.lr_trace.push(lr);
            out.step_losses.push(loss_value);
            batch_losses.push(loss_value);
        }
        if batch_losses.is_empty() {
            break 'epochs;
        }
        let train_rmse = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let val_rmse = evaluate_rmse(&mut net, chips, val_ids, config.batch_size)?;
        log::info!("epoch {epoch} lr {lr:e} train {train_rmse:.5} val {val_rmse:.5}");
        out.log.push(EpochLog { epoch, phase_lr: lr, train_rmse, val_rmse, wall_seconds: start.elapsed().as_secs_f64() });
    }
    out.network = net;
    Ok(out)
}

/// One fold: validation on `config.leave_out_year`, training on the rest.
pub fn train_fold(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let year = config.leave_out_year.ok_or_else(|| Error::invalid("leave_out_year is required for a fold"))?;
    if data.years().len() < 2 {
        return Err(Error::invalid("cross-validation needs at least two years"));
    }
    let split = data.cv_split(year)?;
    fit(config, &data.chips, &split.train_ids, &split.val_ids)
}

/// Pooled-pixel metrics of `net` on the chips at `ids`.
pub fn validation_metrics(net: &mut Network, chips: &[Chip], ids: &[usize], batch: usize) -> Result<MetricReport> {
    let refs: Vec<&Chip> = ids.iter().map(|&i| &chips[i]).collect();
    let preds = predict_chips(net, &refs, batch)?;
    let pred: Vec<f64> = preds.into_iter().flatten().collect();
    let obs: Vec<f64> = refs.iter().flat_map(|c| c.target.iter().map(|&v| v as f64)).collect();
    compute_metrics(&pred, &obs)
}

#[derive(Clone, Debug)]
pub struct CvFold {
    pub year: i32,
    pub kind: ModelKind,
    pub outcome: TrainOutcome,
    pub metrics: MetricReport,
}

/// Leave-one-year-out over every year of `data`, for each model kind.
pub fn run_cv(base: &TrainConfig, data: &Dataset, kinds: &[ModelKind]) -> Result<Vec<CvFold>> {
    let years = data.years();
    if years.len() < 2 {
        return Err(Error::invalid("cross-validation needs at least two years"));
    }
    let mut folds = Vec::new();
    for &year in &years {
        let split = data.cv_split(year)?;
        for &kind in kinds {
            let config = TrainConfig { leave_out_year: Some(year), model: kind, ..base.clone() };
            let mut outcome = fit(&config, &data.chips, &split.train_ids, &split.val_ids)?;
            let metrics = validation_metrics(&mut outcome.network, &data.chips, &split.val_ids, config.batch_size)?;
            log::info!("fold {year} {}: r2 {:?} rmse {:.4}", kind.as_str(), metrics.r2, metrics.rmse);
            folds.push(CvFold { year, kind, outcome, metrics });
        }
    }
    Ok(folds)
}

/// Table with one row per leave-out year and `{r2, slope, spearman, rmse}`
/// columns per model kind present in `folds`.
pub fn write_cv_table(path: &Path, folds: &[CvFold]) -> Result<()> {
    let mut kinds: Vec<ModelKind> = Vec::new();
    for f in folds {
        if !kinds.contains(&f.kind) {
            kinds.push(f.kind);
        }
    }
    let mut by_year: BTreeMap<i32, BTreeMap<&str, &MetricReport>> = BTreeMap::new();
    for f in folds {
        by_year.entry(f.year).or_default().insert(f.kind.as_str(), &f.metrics);
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["year".to_string()];
    for k in &kinds {
        for m in ["r2", "slope", "spearman", "rmse"] {
            header.push(format!("{}_{m}", k.as_str()));
        }
    }
    w.write_record(&header)?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    for (year, row) in by_year {
        let mut rec = vec![year.to_string()];
        for k in &kinds {
            match row.get(k.as_str()) {
                Some(m) => rec.extend([cell(m.r2), cell(m.slope), cell(m.spearman), cell(Some(m.rmse))]),
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
