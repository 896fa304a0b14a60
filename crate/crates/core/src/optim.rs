//! Adam with weight decay, warmup + cosine schedule, and the training loop.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::model::{GraphTransformer, ModelInput, ModelParams};
use crate::tensor::{DropoutKey, Penalty, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// AdamW-style decay applied to the weights instead of the gradient.
    pub decoupled_decay: bool,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_epochs: 25,
            total_epochs: 300,
            weight_decay: 1e-4,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            decoupled_decay: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config(format!(
                "need 0 < min_lr <= base_lr, got {} / {}",
                self.min_lr, self.base_lr
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::Config(
                "weight_decay >= 0 and adam_eps > 0 required".into(),
            ));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at a (possibly fractional) epoch.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs as f64;
    if !(0.0..=total).contains(&epoch) {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside [0, {total}]"
        )));
    }
    let (base, warm) = (cfg.base_lr, cfg.warmup_epochs as f64);
    if epoch < warm {
        return Ok(0.1 * base + 0.9 * base * (epoch / warm));
    }
    let progress = (epoch - warm) / (total - warm);
    Ok(cfg.min_lr + 0.5 * (base - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    if let Some((p, g)) = params
        .iter()
        .zip(grads)
        .find(|(p, g)| p.shape() != g.shape())
    {
        return Err(Error::shape(
            "adam_step",
            format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let wd = cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = if cfg.decoupled_decay {
                gj
            } else {
                gj + wd * *w
            };
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.adam_eps);
            if cfg.decoupled_decay {
                *w -= lr * wd * *w;
            }
            *w -= lr * update;
        }
    }
    Ok(())
}

/// One supervised sample: model input plus node-major `N × T` targets and
/// weights (0 = ignored).
#[derive(Clone, Debug)]
pub struct Example {
    pub input: ModelInput,
    pub target: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Batch loss `Σ M·penalty / (Σ M + ε)`, pooled over every sample in the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub penalty: Penalty,
    pub epsilon: f64,
}

impl Objective {
    pub fn masked_huber(cfg: &crate::objective::LossConfig) -> Self {
        Objective {
            penalty: Penalty::Huber { delta: cfg.delta },
            epsilon: cfg.epsilon,
        }
    }

    /// Mean squared error over the weighted entries.
    pub fn squared() -> Self {
        Objective {
            penalty: Penalty::Squared,
            epsilon: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_masked_mae: f64,
    pub val_masked_mae: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_masked_mae,val_masked_mae";

impl EpochRecord {
    /// CSV row; floats use the shortest exact representation.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_masked_mae,
            self.val_masked_mae
                .map(|v| v.to_string())
                .unwrap_or_default()
        )
    }
}

pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub struct FitOutput {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    /// Optimizer steps taken.
    pub steps: u64,
}

struct SampleGrad {
    penalty: f64,
    weight: f64,
    abs_err: f64,
    grads: Vec<Tensor>,
}

fn sample_gradient(
    model: &GraphTransformer,
    params: &ModelParams,
    ex: &Example,
    objective: &Objective,
    key: DropoutKey,
) -> Result<SampleGrad> {
    let mut tape = Tape::training(key);
    let p = model.bind(&mut tape, params);
    let y = model.forward(&mut tape, &p, &ex.input, true)?;
    let pred = tape.value(y).data();
    let abs_err = pred
        .iter()
        .zip(&ex.target)
        .zip(&ex.mask)
        .filter(|(_, &m)| m != 0.0)
        .map(|((p, t), _)| (p - t).abs())
        .sum();
    let s = tape.penalty_sum(y, &ex.target, &ex.mask, objective.penalty)?;
    let g = tape.backward(s)?;
    Ok(SampleGrad {
        penalty: tape.value(s).item()?,
        weight: ex.mask.iter().sum(),
        abs_err,
        grads: p.iter().map(|&v| g.tensor(v)).collect(),
    })
}

/// Eval-mode masked MAE pooled over all weighted entries.
pub fn evaluate_masked_mae(
    model: &GraphTransformer,
    params: &ModelParams,
    data: &[Example],
    exec: Execution,
) -> Result<f64> {
    let parts = map_ordered(exec, data, |_, ex| -> Result<(f64, f64)> {
        let y = model.predict(params, &ex.input)?;
        let (mut s, mut c) = (0.0, 0.0);
        for ((p, t), &m) in y.data().iter().zip(&ex.target).zip(&ex.mask) {
            if m != 0.0 {
                s += (p - t).abs();
                c += 1.0;
            }
        }
        Ok((s, c))
    });
    let (mut s, mut c) = (0.0, 0.0);
    for r in parts {
        let (a, b) = r?;
        s += a;
        c += b;
    }
    Ok(if c > 0.0 { s / c } else { 0.0 })
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Train for `cfg.total_epochs`. `on_epoch` sees each finished epoch's record
/// and parameters (for checkpointing) and may stop the run early.
pub fn fit(
    model: &GraphTransformer,
    init: ModelParams,
    train: &[Example],
    val: &[Example],
    objective: Objective,
    cfg: &TrainConfig,
    exec: Execution,
    on_epoch: &mut dyn FnMut(&EpochRecord, &ModelParams) -> Result<ControlFlow<()>>,
) -> Result<FitOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    model.check_params(&init)?;
    let mut params = init;
    let mut state = AdamState::new(&params.tensors);
    let mut log = Vec::with_capacity(cfg.total_epochs);

    for epoch in 0..cfg.total_epochs {
        let lr = lr_at(epoch as f64, cfg)?;
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut abs_sum, mut abs_count) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results = map_ordered(exec, chunk, |slot, &i| {
                let key = DropoutKey::new(cfg.seed, epoch as u64, b as u64, slot as u64);
                sample_gradient(model, &params, &train[i], &objective, key)
            });
            let mut grads: Vec<Tensor> = params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            let (mut penalty, mut weight) = (0.0, 0.0);
            for r in results {
                let r = r?;
                penalty += r.penalty;
                weight += r.weight;
                abs_sum += r.abs_err;
                abs_count += r.weight;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let denom = weight + objective.epsilon;
            let loss = if denom > 0.0 { penalty / denom } else { 0.0 };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: loss,
                });
            }
            let scale = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            if let Some(max) = cfg.grad_clip {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    let c = max / norm;
                    grads
                        .iter_mut()
                        .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= c));
                }
            }
            adam_step(&mut params.tensors, &grads, &mut state, lr, cfg)?;
            loss_sum += loss;
            batches += 1;
        }
        let val_masked_mae = if val.is_empty() {
            None
        } else {
            Some(evaluate_masked_mae(model, &params, val, exec)?)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / batches as f64,
            train_masked_mae: if abs_count > 0.0 {
                abs_sum / abs_count
            } else {
                0.0
            },
            val_masked_mae,
        };
        log::info!(
            "epoch {:>4} lr {:.3e} loss {:.5} mae {:.4}{}",
            record.epoch,
            record.lr,
            record.train_loss,
            record.train_masked_mae,
            record
                .val_masked_mae
                .map(|v| format!(" val {v:.4}"))
                .unwrap_or_default()
        );
        let flow = on_epoch(&record, &params)?;
        log.push(record);
        if flow.is_break() {
            break;
        }
    }
    Ok(FitOutput {
        params,
        log,
        steps: state.step,
    })
}
