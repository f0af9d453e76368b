//! Training loop, metrics and early stopping.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{chronological_split, make_windows, Normalizer, Split, SplitBounds, TimeSeriesDataset, WindowSample, WindowSet};
use crate::error::{Error, Result};
use crate::model::{stack_targets, EmaFormer, Mode};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::params::rng_for;
use crate::tensor::{Tape, Tensor};

pub const SHUFFLE_STREAM: u64 = 1;
pub const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    /// Step between consecutive training windows.
    pub train_stride: usize,
    /// Step between consecutive validation and test windows.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            clip_norm: crate::optim::CLIP_NORM,
            train_stride: 1,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("train_stride", self.train_stride),
            ("eval_stride", self.eval_stride),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} is not a non-negative number", self.lr)));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("{b} not in [0, 1)")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// A dataset z-scored with training-span statistics, plus its split.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: TimeSeriesDataset,
    pub bounds: SplitBounds,
    pub normalizer: Normalizer,
    pub lookback: usize,
    pub horizon: usize,
}

impl PreparedData {
    pub fn new(raw: &TimeSeriesDataset, ratios: (f64, f64, f64), lookback: usize, horizon: usize) -> Result<Self> {
        let bounds = chronological_split(raw.steps(), ratios, lookback, horizon)?;
        let normalizer = Normalizer::fit(&raw.values, bounds.train_end)?;
        let dataset = raw.with_values(normalizer.apply(&raw.values)?)?;
        Ok(Self { dataset, bounds, normalizer, lookback, horizon })
    }

    pub fn windows(&self, split: Split, period: usize, stride: usize) -> Result<WindowSet<'_>> {
        make_windows(&self.dataset, &self.bounds, split, self.lookback, self.horizon, period, stride)
    }
}

/// Anything that maps windows to `[H × C]` forecasts.
pub trait Predictor {
    fn predict_windows(&self, windows: &[WindowSample]) -> Result<Vec<Tensor>>;
}

impl Predictor for EmaFormer {
    fn predict_windows(&self, windows: &[WindowSample]) -> Result<Vec<Tensor>> {
        EmaFormer::predict_windows(self, windows)
    }
}

/// Mean absolute deviation over all elements.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("l1_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if pred.is_empty() {
        return Err(Error::Contract("l1_loss on empty tensors".into()));
    }
    Ok(pred.data().iter().zip(target.data()).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

const EVAL_BATCH: usize = 64;

/// MSE and MAE over every element of every window.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, windows: &WindowSet<'_>) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::Contract("evaluation needs at least one window".into()));
    }
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    let mut start = 0;
    while start < windows.len() {
        let end = (start + EVAL_BATCH).min(windows.len());
        let batch: Vec<WindowSample> = (start..end).map(|i| windows.get(i)).collect();
        let preds = model.predict_windows(&batch)?;
        for (p, w) in preds.iter().zip(&batch) {
            if p.shape() != w.y.shape() {
                return Err(Error::dim("evaluate", format!("{:?} vs {:?}", p.shape(), w.y.shape())));
            }
            for (a, b) in p.data().iter().zip(w.y.data()) {
                se += (a - b) * (a - b);
                ae += (a - b).abs();
            }
            count += p.len();
        }
        start = end;
    }
    Ok(Metrics { mse: se / count as f64, mae: ae / count as f64, windows: windows.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub valid_mse: f64,
    pub valid_mae: f64,
}

impl EpochRecord {
    /// `epoch, train_l1, valid_mse, valid_mae`
    pub fn line(&self) -> String {
        format!("{}, {:.6}, {:.6}, {:.6}", self.epoch, self.train_l1, self.valid_mse, self.valid_mae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub seed: u64,
    pub train_windows: usize,
    pub steps: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_mse: f64,
    pub stopped_early: bool,
    pub test: Metrics,
    pub wall_clock_seconds: f64,
}

pub struct TrainData<'a> {
    pub train: WindowSet<'a>,
    pub valid: WindowSet<'a>,
    pub test: WindowSet<'a>,
}

impl<'a> TrainData<'a> {
    pub fn from_prepared(data: &'a PreparedData, period: usize, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            train: data.windows(Split::Train, period, cfg.train_stride)?,
            valid: data.windows(Split::Valid, period, cfg.eval_stride)?,
            test: data.windows(Split::Test, period, cfg.eval_stride)?,
        })
    }
}

/// One optimiser step on a batch; returns the batch L1 loss before the update.
pub fn train_step(
    model: &mut EmaFormer,
    batch: &[WindowSample],
    state: &mut AdamState,
    clip_norm: f64,
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<f64> {
    let xs: Vec<&Tensor> = batch.iter().map(|w| &w.x).collect();
    let ts: Vec<usize> = batch.iter().map(|w| w.t_last).collect();
    let ys: Vec<&Tensor> = batch.iter().map(|w| &w.y).collect();
    let target = stack_targets(&ys)?;
    let mut tape = Tape::new();
    let pass = model.forward_batch(&mut tape, &xs, &ts, Mode::Train(dropout_rng), false)?;
    let loss = tape.l1_loss(pass.prediction, &target)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let mut grads: Vec<Option<Tensor>> = pass.bound.vars().iter().map(|v| tape.grad(*v)).collect();
    clip_global_norm(&mut grads, clip_norm);
    adam_step(model.params_mut(), &grads, state)?;
    Ok(value)
}

/// Trains with early stopping on validation MSE, restores the best
/// parameters and reports test metrics for them. With `checkpoint_dir`, the
/// best snapshot is written there on every improvement.
pub fn train(
    model: &mut EmaFormer,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Contract("no training windows".into()));
    }
    let clock = Instant::now();
    let seed = model.config().seed;
    let mut shuffle_rng = rng_for(seed, SHUFFLE_STREAM);
    let mut dropout_rng = rng_for(seed, DROPOUT_STREAM);
    let mut state = AdamState::new(model.params(), cfg.adam());
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, crate::params::ParamStore)> = None;
    let mut last_good: Option<PathBuf> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<WindowSample> = chunk.iter().map(|&i| data.train.get(i)).collect();
            let loss = match train_step(model, &batch, &mut state, cfg.clip_norm, &mut dropout_rng) {
                Ok(l) if l.is_finite() => l,
                Ok(l) => return Err(diverged(format!("training loss {l} at epoch {epoch}"), &last_good)),
                Err(e @ (Error::NonFinite { .. } | Error::NonFiniteGradient { .. })) => {
                    return Err(diverged(format!("{e} at epoch {epoch}"), &last_good))
                }
                Err(e) => return Err(e),
            };
            total += loss * batch.len() as f64;
        }
        let valid = evaluate(model, &data.valid)?;
        if !valid.mse.is_finite() {
            return Err(diverged(format!("validation MSE {} at epoch {epoch}", valid.mse), &last_good));
        }
        let record = EpochRecord {
            epoch,
            train_l1: total / data.train.len() as f64,
            valid_mse: valid.mse,
            valid_mae: valid.mae,
        };
        on_epoch(&record);
        epochs.push(record);

        if best.as_ref().is_none_or(|(_, mse, _)| valid.mse < *mse) {
            best = Some((epoch, valid.mse, model.params().clone()));
            if let Some(dir) = checkpoint_dir {
                checkpoint::save(model, dir)?;
                last_good = Some(dir.to_path_buf());
            }
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let (best_epoch, best_valid_mse, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    let test = evaluate(model, &data.test)?;
    Ok(TrainReport {
        variant: model.config().variant_tag(),
        seed,
        train_windows: data.train.len(),
        steps: state.step,
        epochs,
        best_epoch,
        best_valid_mse,
        stopped_early,
        test,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    })
}

fn diverged(reason: String, last_good: &Option<PathBuf>) -> Error {
    Error::Divergence { reason, last_good: last_good.clone() }
}
