//! Adam, the training loop with early stopping, and evaluation metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{batch_loss, ForwardOptions, ModelError, Noise, PreparedSample, TandemConfig, TandemModel};
use crate::nn::ParamStore;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("AUROC needs both classes present")]
    SingleClass,
    #[error("metric input is empty or misaligned")]
    BadMetricInput,
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam with first/second moment state per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Classifier parameters use `lr * classifier_multiplier`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, classifier_multiplier: f64) -> Result<()> {
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(TrainError::NonFiniteGradient(store.entries()[i].name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let rate = if store.entries()[i].classifier { lr * classifier_multiplier } else { lr };
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let theta = store.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                theta[k] -= rate * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

fn default_multiplier() -> f64 {
    1.0
}

fn default_max_epochs() -> usize {
    200
}

fn default_patience() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_multiplier")]
    pub classifier_lr_multiplier: f64,
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            classifier_lr_multiplier: 1.0,
            batch_size: 32,
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.classifier_lr_multiplier >= 0.0 && self.classifier_lr_multiplier.is_finite()) {
            return Err(TrainError::Config("classifier_lr_multiplier must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 0-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

const EPOCH_TAG: u64 = 0x4550_4F43;
const GATE_TAG: u64 = 0x4741_5445;
const BROWN_TAG: u64 = 0x4252_574E;
const EVAL_TAG: u64 = 0x4556_414C;

/// Brownian seed for evaluating sample `index` of a split.
pub fn eval_noise_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(&[seed, EVAL_TAG, index as u64])
}

/// Mean deterministic loss over `samples`.
pub fn mean_loss(model: &TandemModel, samples: &[PreparedSample], batch_size: usize, seed: u64, opts: ForwardOptions) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::BadMetricInput);
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let mut noise = Noise::seeded(0, chunk.iter().map(|&i| eval_noise_seed(seed, i)));
        let mut tape = Tape::with_checks(false);
        let p = model.params.bind(&mut tape);
        let (loss, _) = batch_loss(model, &mut tape, &p, &batch, opts, &mut noise)?;
        total += tape.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Called after every epoch with `(epoch, train_loss, val_loss)`.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, f64, f64);

/// Minimize cross-entropy with Adam; keep the parameters of the epoch with
/// the lowest validation loss.
pub fn train(
    model_config: &TandemConfig,
    config: &TrainConfig,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    mut hook: Option<EpochHook<'_>>,
) -> Result<(TandemModel, History)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut model = TandemModel::new(model_config.clone())?;
    let mut adam = Adam::new(&model.params);
    let mut history = History {
        best_val_loss: f64::INFINITY,
        ..History::default()
    };
    let mut best = model.params.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng::stream(&[config.seed, EPOCH_TAG, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut noise = Noise {
                gate: rng::stream(&[config.seed, GATE_TAG, epoch as u64, b as u64]),
                sde: chunk
                    .iter()
                    .map(|&i| rng::stream(&[config.seed, BROWN_TAG, epoch as u64, i as u64]))
                    .collect(),
            };
            let mut tape = Tape::with_checks(false);
            let p = model.params.bind(&mut tape);
            let (loss, _) = batch_loss(&model, &mut tape, &p, &batch, ForwardOptions::train(), &mut noise)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss: value });
            }
            let grads = tape.backward(loss).map_err(ModelError::from)?;
            let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.get(v)).collect::<std::result::Result<_, _>>().map_err(ModelError::from)?;
            adam.step(&mut model.params, &grads, config.lr, config.classifier_lr_multiplier)?;
            epoch_loss += value * chunk.len() as f64;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = mean_loss(&model, val_set, config.batch_size, config.seed, ForwardOptions::validation())?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
            });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.epochs_run = epoch + 1;
        if let Some(h) = hook.as_mut() {
            h(epoch, train_loss, val_loss);
        }
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = model.params.clone();
        } else if epoch - history.best_epoch >= config.patience {
            history.stopped_early = true;
            break;
        }
    }
    model.params = best;
    Ok((model, history))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the 1-based label.
pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(TrainError::BadMetricInput);
    }
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) + 1 == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Probability that a positive outranks a negative, ties counted one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.is_empty() || scores.len() != positive.len() || scores.iter().any(|s| s.is_nan()) {
        return Err(TrainError::BadMetricInput);
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney U from average ranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Binary problems only; positive class is label 2.
    pub auroc: Option<f64>,
    pub loss: f64,
}

pub fn evaluate(model: &TandemModel, samples: &[PreparedSample], batch_size: usize, seed: u64) -> Result<Metrics> {
    let probs = model.predict(samples, batch_size, |i| eval_noise_seed(seed, i))?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let acc = accuracy(&probs, &labels)?;
    let auroc = if model.config.classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 2).collect();
        auroc(&scores, &pos).ok()
    } else {
        None
    };
    Ok(Metrics {
        accuracy: acc,
        auroc,
        loss: mean_loss(model, samples, batch_size, seed, ForwardOptions::eval())?,
    })
}
