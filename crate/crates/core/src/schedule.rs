//! Exponential learning-rate decay: `lr(e) = initial_lr · decay^(e / decay_per_epoch)`,
//! with the exponent floored in staircase mode.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub initial_lr: f64,
    pub decay: f64,
    /// Epochs between successive applications of `decay`.
    pub decay_per_epoch: f64,
    #[serde(default)]
    pub staircase: bool,
}

impl ScheduleParams {
    /// 0.01 / 0.80 / 0.1.
    pub const TUNED: ScheduleParams = ScheduleParams {
        initial_lr: 0.01,
        decay: 0.80,
        decay_per_epoch: 0.1,
        staircase: false,
    };

    /// 0.001 / 0.95 / 1.0.
    pub const BASELINE: ScheduleParams = ScheduleParams {
        initial_lr: 0.001,
        decay: 0.95,
        decay_per_epoch: 1.0,
        staircase: false,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(invalid(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(invalid(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.decay_per_epoch > 0.0 && self.decay_per_epoch.is_finite()) {
            return Err(invalid(format!(
                "decay_per_epoch must be positive, got {}",
                self.decay_per_epoch
            )));
        }
        Ok(())
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::TUNED
    }
}

pub fn lr_at(epoch: f64, params: &ScheduleParams) -> Result<f64> {
    params.validate()?;
    if !(epoch >= 0.0 && epoch.is_finite()) {
        return Err(invalid(format!("epoch must be non-negative, got {epoch}")));
    }
    let mut exponent = epoch / params.decay_per_epoch;
    if params.staircase {
        exponent = exponent.floor();
    }
    Ok(params.initial_lr * params.decay.powf(exponent))
}

/// Samples `lr_at` at `0, step, 2·step, …` up to and including `epoch_max`.
pub fn emit_curve(params: &ScheduleParams, epoch_max: f64, step: f64) -> Result<Vec<(f64, f64)>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid(format!("step must be positive, got {step}")));
    }
    if !(epoch_max >= 0.0 && epoch_max.is_finite()) {
        return Err(invalid(format!("epoch_max must be non-negative, got {epoch_max}")));
    }
    // tolerate representation error in epoch_max / step
    let rows = (epoch_max / step + 1e-9).floor() as usize + 1;
    (0..rows)
        .map(|i| {
            let e = i as f64 * step;
            lr_at(e, params).map(|lr| (e, lr))
        })
        .collect()
}
