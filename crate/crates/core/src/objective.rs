//! Mask-aware Huber loss, full-supervision MSE and masked metrics.
//!
//! Each loss exists twice: as a plain function returning `(value, dL/dpred)`
//! and as a tape expression built from [`Tape::penalty_sum`]. The two are
//! computed independently and cross-checked in tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Penalty, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Huber threshold in pixels.
    pub delta: f64,
    /// Added to the observed count in the denominator.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            delta: 1.0,
            epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "loss needs delta > 0 and epsilon > 0, got {} / {}",
                self.delta, self.epsilon
            )));
        }
        Ok(())
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    Penalty::Huber { delta }.value(r)
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} vs {b} entries")));
    }
    Ok(())
}

/// `Σ M·Huber(pred − target) / (Σ M + ε)` and its gradient with respect to
/// `pred`. Masked entries get exactly zero gradient.
pub fn masked_huber_loss(
    pred: &[f64],
    target: &[f64],
    mask: &[f64],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    check_len("masked_huber_loss", pred.len(), target.len())?;
    check_len("masked_huber_loss", pred.len(), mask.len())?;
    let count: f64 = mask.iter().sum();
    let denom = count + cfg.epsilon;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if mask[i] == 0.0 {
            continue;
        }
        let r = pred[i] - target[i];
        let a = r.abs();
        if a <= cfg.delta {
            total += mask[i] * 0.5 * r * r;
            grad[i] = mask[i] * r / denom;
        } else {
            total += mask[i] * cfg.delta * (a - 0.5 * cfg.delta);
            grad[i] = mask[i] * cfg.delta * r.signum() / denom;
        }
    }
    Ok((total / denom, grad))
}

/// Mean squared error over all entries and its gradient.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("mse_loss", pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            total += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((total / n, grad))
}

/// Mean absolute error over entries with `mask != 0`; zero when none are.
pub fn masked_mae(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    check_len("masked_mae", pred.len(), target.len())?;
    check_len("masked_mae", pred.len(), mask.len())?;
    let (mut s, mut c) = (0.0, 0.0);
    for i in 0..pred.len() {
        if mask[i] != 0.0 {
            s += (pred[i] - target[i]).abs();
            c += 1.0;
        }
    }
    Ok(if c > 0.0 { s / c } else { 0.0 })
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len("rmse", pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Tape form of [`masked_huber_loss`].
pub fn masked_huber_on_tape(
    tape: &mut Tape,
    pred: Var,
    target: &[f64],
    mask: &[f64],
    cfg: &LossConfig,
) -> Result<Var> {
    let count: f64 = mask.iter().sum();
    let s = tape.penalty_sum(pred, target, mask, Penalty::Huber { delta: cfg.delta })?;
    Ok(tape.scale(s, 1.0 / (count + cfg.epsilon)))
}

/// Tape form of [`mse_loss`].
pub fn mse_on_tape(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let ones = vec![1.0; target.len()];
    let s = tape.penalty_sum(pred, target, &ones, Penalty::Squared)?;
    Ok(tape.scale(s, 1.0 / target.len().max(1) as f64))
}
