//! Pseudo-Huber loss `δ²(√(1 + (a/δ)²) − 1)` on probability residuals.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuberParams {
    pub delta: f64,
}

impl Default for HuberParams {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("huber delta must be positive, got {delta}")))
    }
}

pub fn huber_scalar(a: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(huber(a, delta))
}

pub fn huber_grad_scalar(a: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    Ok(huber_grad(a, delta))
}

#[inline]
fn huber(a: f64, delta: f64) -> f64 {
    let r = a / delta;
    // δ² r² / (√(1+r²) + 1) avoids cancellation for small residuals
    delta * delta * r * r / ((1.0 + r * r).sqrt() + 1.0)
}

#[inline]
fn huber_grad(a: f64, delta: f64) -> f64 {
    let r = a / delta;
    a / (1.0 + r * r).sqrt()
}

/// Mean pseudo-Huber loss over all `B x L` entries and its gradient with
/// respect to `probs`.
pub fn multilabel_loss(
    probs: &Array2<f64>,
    targets: &Array2<f64>,
    params: &HuberParams,
) -> Result<(f64, Array2<f64>)> {
    check_delta(params.delta)?;
    if probs.dim() != targets.dim() {
        return Err(shape(format!(
            "probabilities are {:?}, targets are {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    if probs.is_empty() {
        return Err(shape("empty probability matrix"));
    }
    if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(invalid("targets must be 0 or 1"));
    }
    let n = probs.len() as f64;
    let delta = params.delta;
    let mut total = 0.0;
    let mut grad = Array2::<f64>::zeros(probs.dim());
    for ((g, &p), &y) in grad.iter_mut().zip(probs.iter()).zip(targets.iter()) {
        let a = p - y;
        total += huber(a, delta);
        *g = huber_grad(a, delta) / n;
    }
    Ok((total / n, grad))
}
