//! Training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Scratch,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Learning-rate multiplier applied in fine-tune mode.
    #[serde(default = "default_lr_scale")]
    pub finetune_lr_scale: f64,
    /// Fraction of the target training split used when fine-tuning.
    #[serde(default = "default_fraction")]
    pub finetune_fraction: f64,
}

fn default_lr_scale() -> f64 {
    0.1
}

fn default_fraction() -> f64 {
    1.0
}

impl TrainConfig {
    /// Desk-scale scratch defaults: 50 epochs of Adam(1e-3) at batch 64.
    pub fn desk_scratch(seed: u64) -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
            mode: TrainMode::Scratch,
            finetune_lr_scale: 0.1,
            finetune_fraction: 1.0,
        }
    }

    /// Desk-scale fine-tune defaults: 20 epochs at a tenth of the rate.
    pub fn desk_finetune(seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            mode: TrainMode::Finetune,
            ..TrainConfig::desk_scratch(seed)
        }
    }

    /// Full-scale epoch counts (200 scratch / 50 fine-tune).
    pub fn full_scratch(seed: u64) -> Self {
        TrainConfig {
            epochs: 200,
            ..TrainConfig::desk_scratch(seed)
        }
    }

    pub fn full_finetune(seed: u64) -> Self {
        TrainConfig {
            epochs: 50,
            ..TrainConfig::desk_finetune(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArg(
                "batch size must be >= 2 (batch statistics undefined otherwise)".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArg("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArg(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArg("adam eps must be positive".into()));
        }
        if !(self.finetune_lr_scale > 0.0 && self.finetune_lr_scale <= 1.0) {
            return Err(Error::InvalidArg(format!(
                "finetune_lr_scale must lie in (0,1], got {}",
                self.finetune_lr_scale
            )));
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction <= 1.0) {
            return Err(Error::InvalidArg(format!(
                "finetune_fraction must lie in (0,1], got {}",
                self.finetune_fraction
            )));
        }
        Ok(())
    }
}
