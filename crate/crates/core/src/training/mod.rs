//! Mini-batch training with AdamW, early stopping, and evaluation metrics.

mod metrics;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{bhattacharyya_score, field_means, metrics_for, regression_metrics, Level, MetricsReport};

use crate::data::{normalize_apply, normalize_fit, pad_batch, PixelSample, Split, SplitAssignment};
use crate::encoders::{apply_bn_updates, Ctx};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultimodalModel};
use crate::numgrad::{AdamW, AdamWConfig, Array, LrSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub cosine_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Validation loss must drop by more than this to count as an improvement.
    pub min_delta: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Start the head bias at the mean training target.
    pub init_bias_to_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            lr: 0.001,
            weight_decay: 0.02,
            warmup_epochs: 5,
            cosine_epochs: 50,
            max_epochs: 55,
            patience: 10,
            min_delta: 0.0,
            seed: 0,
            loss: LossKind::Mse,
            init_bias_to_mean: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size, patience and epoch cap must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.min_delta >= 0.0) {
            return Err(Error::Config("learning rate, weight decay and min_delta must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss\n");
        for e in &self.epochs {
            s += &format!("{},{},{},{}\n", e.epoch, e.lr, e.train_loss, e.val_loss);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: MultimodalModel,
    pub history: History,
}

/// Normalizes samples with the statistics stored in `model`.
pub fn normalize_for(model: &MultimodalModel, samples: &[&PixelSample]) -> Vec<PixelSample> {
    match &model.norm {
        Some(stats) => samples.iter().map(|s| normalize_apply(s, stats)).collect(),
        None => samples.iter().map(|s| (*s).clone()).collect(),
    }
}

fn mse(model: &MultimodalModel, samples: &[&PixelSample]) -> Result<f64> {
    let yhat = model.predict_values(samples)?;
    Ok(samples.iter().zip(&yhat).map(|(s, p)| (s.y - p).powi(2)).sum::<f64>() / samples.len() as f64)
}

/// Trains on the raw samples of the training split, monitoring validation loss.
///
/// Normalization statistics are fitted on the training split and stored in the returned model.
pub fn train(model_config: &ModelConfig, samples: &[PixelSample], split: &SplitAssignment, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let raw_train: Vec<&PixelSample> = samples.iter().filter(|s| split.split_of(s) == Some(Split::Train)).collect();
    let raw_val: Vec<&PixelSample> = samples.iter().filter(|s| split.split_of(s) == Some(Split::Val)).collect();
    if raw_train.is_empty() || raw_val.is_empty() {
        return Err(Error::contract("training needs non-empty train and validation splits"));
    }
    let mut model = MultimodalModel::new(model_config.clone(), cfg.seed)?;
    model.norm = Some(normalize_fit(raw_train.iter().copied())?);
    let train_set = normalize_for(&model, &raw_train);
    let val_set = normalize_for(&model, &raw_val);
    let val_refs: Vec<&PixelSample> = val_set.iter().collect();
    if cfg.init_bias_to_mean {
        model.set_bias(train_set.iter().map(|s| s.y).sum::<f64>() / train_set.len() as f64);
    }

    let schedule = LrSchedule { warmup_epochs: cfg.warmup_epochs, cosine_epochs: cfg.cosine_epochs };
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() }, model.store.values());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best = (f64::INFINITY, model.store.clone());
    let mut stale = 0;

    for epoch in 0..cfg.max_epochs {
        let lr = schedule.lr(epoch as i64, cfg.lr)?;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch_samples: Vec<&PixelSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = pad_batch(&batch_samples)?;
            let (loss, grads, updates) = {
                let mut ctx = Ctx::new(&model.store, true, ChaCha8Rng::seed_from_u64(rng.gen()));
                let out = model.forward(&mut ctx, &batch)?;
                let y = ctx.g.constant(Array::new(vec![batch.len(), 1], batch.y.clone())?);
                let diff = ctx.g.sub(out.yhat, y)?;
                let sq = ctx.g.mul(diff, diff)?;
                let loss = ctx.g.mean(sq);
                let value = ctx.g.value(loss).item()?;
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch, loss: value });
                }
                ctx.g.backward(loss)?;
                (value, ctx.param_grads(), ctx.take_bn_updates())
            };
            total += loss * idx.len() as f64;
            let grads: Vec<Array> = grads
                .into_iter()
                .zip(model.store.values())
                .map(|(g, p)| g.unwrap_or_else(|| Array::zeros(p.shape())))
                .collect();
            let grad_refs: Vec<&Array> = grads.iter().collect();
            opt.step(&mut model.store.values_mut(), &grad_refs, lr)?;
            apply_bn_updates(&mut model.store, &updates);
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = mse(&model, &val_refs)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        log::info!("epoch {epoch}: lr {lr:.6} train {train_loss:.5} val {val_loss:.5}");
        history.epochs.push(EpochRecord { epoch, lr, train_loss, val_loss });
        if val_loss < best.0 - cfg.min_delta || history.epochs.len() == 1 {
            best = (val_loss, model.store.clone());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.store = best.1;
    Ok(TrainOutcome { model, history })
}

/// Subfield and field-level metrics of `model` on raw samples.
pub fn evaluate(model: &MultimodalModel, samples: &[&PixelSample]) -> Result<[MetricsReport; 2]> {
    let normalized = normalize_for(model, samples);
    let refs: Vec<&PixelSample> = normalized.iter().collect();
    let yhat = model.predict_values(&refs)?;
    Ok([metrics_for(&refs, &yhat, Level::Subfield)?, metrics_for(&refs, &yhat, Level::Field)?])
}
