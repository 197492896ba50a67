//! SGD with momentum and L2 weight decay, plus the step learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::model::{ParamKind, ParamStore};

/// Velocity buffers, one per parameter id, created on first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Option<Vec<f32>>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

/// One update of every trainable parameter that holds a gradient:
/// `v <- momentum * v + grad + weight_decay * p`, then `p <- p - lr * v`.
pub fn sgd_step(params: &mut ParamStore, state: &mut SgdState, lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
    if state.velocity.len() < params.len() {
        state.velocity.resize(params.len(), None);
    }
    for (id, (name, tensor, kind)) in params.iter_mut().enumerate() {
        if kind != ParamKind::Trainable {
            continue;
        }
        let Some(grad) = tensor.grad().map(<[f32]>::to_vec) else { continue };
        let v = state.velocity[id].get_or_insert_with(|| vec![0.0; grad.len()]);
        if v.len() != grad.len() {
            return Err(Error::Dimension(format!("optimizer state for {name} has the wrong length")));
        }
        for ((p, vi), g) in tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
            *vi = momentum * *vi + g + weight_decay * *p;
            *p -= lr * *vi;
        }
    }
    Ok(())
}

/// Optimizer and schedule settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f32,
    pub seed: u64,
    /// Random crop with 4-pixel padding plus horizontal flips.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epochs: vec![10, 15],
            lr_decay_factor: 0.1,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Defaults with the decay milestones at 50% and 75% of `epochs`.
    pub fn with_epochs(epochs: usize) -> Self {
        let mut lr_decay_epochs = vec![epochs / 2, epochs * 3 / 4];
        lr_decay_epochs.dedup();
        Self { epochs, lr_decay_epochs, ..Self::default() }
    }

    /// Names of invalid fields with the reason, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("train.batch_size: must be positive".to_string());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            out.push("train.lr: must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push("train.momentum: must lie in [0, 1)".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            out.push("train.weight_decay: must be non-negative".to_string());
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            out.push("train.lr_decay_epochs: must be strictly increasing".to_string());
        }
        if !(self.lr_decay_factor > 0.0) {
            out.push("train.lr_decay_factor: must be positive".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            input_err(problems.join("; "))
        }
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f32 {
    let decays = config.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    config.lr * config.lr_decay_factor.powi(decays as i32)
}
