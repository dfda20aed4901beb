//! Gradient computation, Adam with decoupled weight decay, the fine-tuning
//! loop, masked-language-model pretraining and finite-difference checking.

mod adam;
mod fit;
mod gradcheck;
mod gradients;
mod mlm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, OptimizerState, ParamSet};
pub use fit::{train, train_with_observer, EpochRecord, TrainObserver, TrainOptions, TrainOutcome};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckConfig, GradCheckReport, TensorCheck};
pub use gradients::{batch_loss, compute_gradients, LossBreakdown};
pub use mlm::{mask_positions, pretrain_mlm, MlmEpochRecord, MlmOutcome, MlmParams, DEFAULT_MASK_FRACTION};

/// Optimization hyperparameters. Dropout lives in
/// [`ModelConfig::dropout_keep`](crate::encoder::ModelConfig).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 2019,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { adam_beta2: 1.0, ..TrainConfig::default() },
            TrainConfig { weight_decay: -1.0, ..TrainConfig::default() },
        ] {
            assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        }
    }
}
