//! The mixed training objective, AdamW training over the trainable partition,
//! and finite-difference gradient verification.

pub mod adamw;
pub mod grad_check;
pub mod loss;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::encoder::TrainMode;
use crate::error::{Error, Result};

pub use adamw::AdamW;
pub use loss::{infonce_loss, infonce_loss_with_grad, mixed_loss, mixed_loss_grad, nig_loss, nig_loss_with_grad};
pub use train::{batch_loss, train, train_step, LossParts, StepStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    /// Weight of the target-on-target contrastive term.
    pub alpha: f64,
    /// Weight of the user-on-target contrastive term (negative by default).
    pub beta: f64,
    pub tau_c: f64,
    pub batch_size: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            alpha: 0.125,
            beta: -0.025,
            tau_c: 0.5,
            batch_size: 8,
        }
    }
}

impl MixConfig {
    pub fn nig_weight(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_c > 0.0) {
            return Err(Error::Config(format!("tau_c must be positive, got {}", self.tau_c)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub mode: TrainMode,
    /// Write a checkpoint every N steps (CLI only).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            epochs: 1,
            max_steps: None,
            seed: 0,
            mode: TrainMode::Adapters,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}
