//! Adam and plain SGD over [`ModelParams`], followed by the NetFV spread
//! projection.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::netmodel::{Model, ModelParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }
}

/// Optimizer with its state, as carried between steps and phases.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { step: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(params)),
            OptimizerKind::Sgd => Optimizer::Sgd { step: 0 },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            Optimizer::Adam(s) => s.step,
            Optimizer::Sgd { step } => *step,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &ModelParams, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(model, grads, state, lr),
            Optimizer::Sgd { step } => {
                sgd_step(model, grads, lr)?;
                *step += 1;
                Ok(())
            }
        }
    }
}

fn check_inputs(model: &Model, grads: &ModelParams, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(invalid(format!("learning rate must be finite and non-negative, got {lr}")));
    }
    if !model.params.same_shape(grads) {
        return Err(shape("gradient arrays do not match model parameters"));
    }
    for (name, g) in grads.arrays() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {name}[{i}]")));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update of a flat array. `t` is the 1-based
/// step number.
pub fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let c1 = 1.0 - BETA1.powf(t as f64);
    let c2 = 1.0 - BETA2.powf(t as f64);
    for i in 0..w.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
}

pub fn adam_step(model: &mut Model, grads: &ModelParams, state: &mut AdamState, lr: f64) -> Result<()> {
    check_inputs(model, grads, lr)?;
    if !model.params.same_shape(&state.first_moment) {
        return Err(shape("Adam state does not match model parameters"));
    }
    state.step += 1;
    let t = state.step;
    let gs = grads.arrays();
    let ms = state.first_moment.arrays_mut();
    let vs = state.second_moment.arrays_mut();
    for ((((_, w), (_, g)), (_, m)), (_, v)) in model.params.arrays_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        adam_update(w, g, m, v, t, lr);
    }
    model.params.project_spreads();
    Ok(())
}

pub fn sgd_step(model: &mut Model, grads: &ModelParams, lr: f64) -> Result<()> {
    check_inputs(model, grads, lr)?;
    for ((_, w), (_, g)) in model.params.arrays_mut().into_iter().zip(grads.arrays()) {
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi -= lr * gi;
        }
    }
    model.params.project_spreads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{init_model, ModalityMode, ModelConfig, PoolParams, PoolingKind};
    use crate::pooling::SPREAD_EPS;
    use proptest::prelude::*;

    fn fv_model() -> Model {
        let cfg = ModelConfig {
            pooling_kind: PoolingKind::NetFv,
            cluster_size: 2,
            audio_cluster_size: 1,
            hidden_size: 3,
            d_video: 3,
            d_audio: 2,
            vocab_size: 4,
            modality_mode: ModalityMode::Separate,
        };
        init_model(&cfg, 1).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = fv_model();
        let before = m.clone();
        let g = m.params.zeros_like();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &m.params);
        opt.step(&mut m, &g, 0.1).unwrap();
        assert_eq!(m, before);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut w, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adam_update(&mut w, &[1.0], &mut m, &mut v, 1, 0.1);
        assert!((w[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn spreads_are_projected() {
        let mut m = fv_model();
        let mut g = m.params.zeros_like();
        if let PoolParams::Fv(p) = &mut g.towers[0] {
            p.spreads.fill(100.0);
        }
        sgd_step(&mut m, &g, 1.0).unwrap();
        if let PoolParams::Fv(p) = &m.params.towers[0] {
            assert!(p.spreads.iter().all(|&s| s == SPREAD_EPS));
        }

        let mut m = fv_model();
        let mut state = AdamState::new(&m.params);
        adam_step(&mut m, &g, &mut state, 5.0).unwrap();
        if let PoolParams::Fv(p) = &m.params.towers[0] {
            assert!(p.spreads.iter().all(|&s| s == SPREAD_EPS));
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut m = fv_model();
        let before = m.clone();
        let mut g = m.params.zeros_like();
        g.output_bias.fill(2.0);
        sgd_step(&mut m, &g, 0.0).unwrap();
        assert_eq!(m, before);

        m.params.output_bias.fill(1.0);
        sgd_step(&mut m, &g, 0.5).unwrap();
        assert!(m.params.output_bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(w) = (w - 3)² / 2
        let mut w = -4.0f64;
        let mut steps = 0;
        while (w - 3.0).abs() > 1e-6 {
            w -= 0.1 * (w - 3.0);
            steps += 1;
            assert!(steps <= 200);
        }
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut m = fv_model();
        let mut g = m.params.zeros_like();
        g.hidden_bias[1] = f64::NAN;
        let before = m.clone();
        let err = sgd_step(&mut m, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("hidden.bias[1]"), "{err}");
        let mut state = AdamState::new(&m.params);
        assert!(adam_step(&mut m, &g, &mut state, 0.1).is_err());
        assert_eq!(state.step, 0);
        assert_eq!(m, before);
    }

    proptest! {
        #[test]
        fn adam_step_bounded_and_deterministic(
            signs in proptest::collection::vec(any::<bool>(), 30),
            scale in 1e-4f64..1e3,
            lr in 1e-4f64..1.0,
        ) {
            // constant-magnitude gradients keep |m̂| ≤ √v̂
            let (mut w, mut m, mut v) = ([0.0], [0.0], [0.0]);
            let (mut w2, mut m2, mut v2) = ([0.0], [0.0], [0.0]);
            for (t, s) in signs.iter().enumerate() {
                let g = if *s { scale } else { -scale };
                let prev = w[0];
                adam_update(&mut w, &[g], &mut m, &mut v, t as u64 + 1, lr);
                adam_update(&mut w2, &[g], &mut m2, &mut v2, t as u64 + 1, lr);
                prop_assert!((w[0] - prev).abs() <= lr * (1.0 + 1e-9));
                prop_assert!(w[0].is_finite());
                prop_assert_eq!(w[0], w2[0]);
            }
        }
    }
}
