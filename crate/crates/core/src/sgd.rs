//! Cross-entropy loss and SGD with momentum, Nesterov correction, coupled L2
//! and a piecewise-constant learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    /// `lr0` for the first `constant_epochs`, then halved every `halve_every`
    /// epochs, starting with a halving at epoch `constant_epochs`.
    ConstantThenHalve { constant_epochs: usize, halve_every: usize },
}

impl Schedule {
    pub fn lr(&self, lr0: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => lr0,
            Schedule::ConstantThenHalve { constant_epochs, halve_every } => {
                if epoch < constant_epochs {
                    lr0
                } else {
                    let halvings = (epoch - constant_epochs) / halve_every.max(1) + 1;
                    lr0 * 0.5f64.powi(halvings as i32)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub l2: f64,
    pub schedule: Schedule,
}

impl SgdConfig {
    /// Learning rate 1e-3 held for ten epochs then halved every two,
    /// momentum 0.9 with Nesterov correction.
    pub fn paper_default(l2: f64) -> Self {
        SgdConfig {
            lr0: 1e-3,
            momentum: 0.9,
            nesterov: true,
            l2,
            schedule: Schedule::ConstantThenHalve { constant_epochs: 10, halve_every: 2 },
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.schedule.lr(self.lr0, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.l2 >= 0.0) {
            return Err(Error::arg(format!("invalid SGD config {self:?}")));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits: B×K` against `labels`, and its gradient
/// `(softmax − onehot) / B`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, k] = logits.matrix_dims("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::dim(format!("{} labels for {b} rows of logits", labels.len())));
    }
    if b == 0 {
        return Err(Error::arg("cross_entropy on an empty batch"));
    }
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::arg(format!("label {label} out of range for {k} classes")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad[r * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(&[b, k], grad)?))
}

/// Fraction of rows whose label is among the `k` largest logits. Ties are
/// resolved toward lower class indices.
pub fn top_k_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let [b, classes] = logits.matrix_dims("top_k_accuracy")?;
    if labels.len() != b {
        return Err(Error::dim("label count does not match logits"));
    }
    if b == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let target = row[label];
        // rank = number of classes that beat the label
        let rank = (0..classes)
            .filter(|&j| row[j] > target || (row[j] == target && j < label))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / b as f64)
}

/// One update: `g' = g + l2·w`, `v ← μv + g'`, step `μv + g'` (Nesterov) or
/// `v`, `w ← w − lr(epoch)·step`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    velocity: &mut [Tensor],
    config: &SgdConfig,
    epoch: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let lr = config.lr(epoch);
    let mu = config.momentum;
    for ((w, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if w.shape() != g.shape() || w.shape() != v.shape() {
            return Err(Error::dim(format!(
                "sgd_step: param {:?}, grad {:?}, velocity {:?}",
                w.shape(),
                g.shape(),
                v.shape()
            )));
        }
        let wd = w.data_mut();
        for ((wi, gi), vi) in wd.iter_mut().zip(g.data()).zip(v.data_mut()) {
            let gp = gi + config.l2 * *wi;
            *vi = mu * *vi + gp;
            let step = if config.nesterov { gp + mu * *vi } else { *vi };
            *wi -= lr * step;
        }
    }
    Ok(())
}

/// SGD optimizer owning its velocity buffers.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new<'a>(config: SgdConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let velocity = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Sgd { config, velocity }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], epoch: usize) -> Result<()> {
        sgd_step(params, grads, &mut self.velocity, &self.config, epoch)
    }
}
