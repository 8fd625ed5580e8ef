use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One Adam update with bias correction.
///
/// The gradient is checked tensor by tensor first; if any entry is not
/// finite nothing is modified and the error names the tensor.
pub fn adam_step(
    params: &mut Parameters,
    grad: &[f64],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), TrainError> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::ShapeMismatch { expected: params.len(), got: grad.len() });
    }
    for spec in params.specs() {
        if grad[spec.range()].iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { tensor: spec.name.clone(), step: state.step + 1 });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let w = params.as_mut_slice();
    for i in 0..w.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        w[i] -= config.learning_rate * mhat / (vhat.sqrt() + config.eps);
    }
    Ok(())
}
