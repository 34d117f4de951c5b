//! Mini-batch SGD on softmax cross-entropy.

use std::f64::consts::PI;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CompressibleModel, Dataset, ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the initial rate, reset to the initial rate every
    /// `reset_period` epochs.
    Cyclic { reset_period: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Every searchable layer must be dense.
    Full,
    /// Factorized layers train their two factors; dense layers train as usual.
    Factorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub mode: TrainMode,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let LrSchedule::Cyclic { reset_period } = self.lr_schedule {
            if reset_period == 0 || self.epochs % reset_period != 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "reset period {reset_period} must divide {} epochs",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cyclic { reset_period } => {
                let phase = (epoch % reset_period) as f64 / reset_period as f64;
                0.5 * self.learning_rate * (1.0 + (PI * phase).cos())
            }
        }
    }

    /// Number of times the schedule returns to the initial rate.
    pub fn lr_resets(&self) -> usize {
        match self.lr_schedule {
            LrSchedule::Constant => 0,
            LrSchedule::Cyclic { reset_period } => self.epochs / reset_period,
        }
    }
}

/// Running averages over one epoch's mini-batches (taken before each update).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: CompressibleModel,
    pub curve: Vec<EpochStats>,
}

/// Trains a copy of `model`. Factorized layers keep their rank. Parameters are
/// rounded to storage precision after every epoch, so the result round-trips
/// through a checkpoint exactly.
pub fn train(model: &CompressibleModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mode == TrainMode::Full && model.is_factorized() {
        return Err(ModelError::InvalidConfig(
            "full-mode training requires dense layers".into(),
        ));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut batch_y = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch_x = data.inputs.select(Axis(0), idx);
            batch_y.clear();
            batch_y.extend(idx.iter().map(|&i| data.labels[i]));
            let (loss, grads, w) = model
                .loss_and_grads(&batch_x, &batch_y)
                .map_err(|_| ModelError::Diverged {
                    epoch,
                    loss: f64::NAN,
                })?;
            if !loss.is_finite() {
                return Err(ModelError::Diverged { epoch, loss });
            }
            loss_sum += loss * idx.len() as f64;
            wrong += w;
            model.apply_gradients(&grads, lr);
        }
        model.round_to_storage_precision();
        curve.push(EpochStats {
            epoch,
            learning_rate: lr,
            loss: loss_sum / data.len() as f64,
            error: wrong as f64 / data.len() as f64,
        });
    }
    Ok(TrainOutcome { model, curve })
}
