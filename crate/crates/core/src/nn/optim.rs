//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::model::{Model, ParamGrads};

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: ParamGrads,
    second_moment: ParamGrads,
}

impl OptimState {
    pub fn new(model: &Model, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Domain(format!(
                "learning rate {learning_rate} must be finite and non-negative"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: ParamGrads::zeros_like(model),
            second_moment: ParamGrads::zeros_like(model),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Returns the updated model and state; inputs are untouched.
pub fn optimize_step(
    model: &Model,
    grads: &ParamGrads,
    state: &OptimState,
) -> Result<(Model, OptimState)> {
    if !grads.same_layout(&state.first_moment) {
        return Err(Error::Shape(
            "gradient layout does not match the optimizer state".into(),
        ));
    }
    let mut next_state = state.clone();
    next_state.step += 1;
    let t = next_state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.eps;

    let mut next = model.clone();
    for (l, layer) in next.layers_mut().iter_mut().enumerate() {
        let (w, b) = layer.params_mut();
        let g = &grads.layers[l];
        let m = &mut next_state.first_moment.layers[l];
        let v = &mut next_state.second_moment.layers[l];
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        update(w, &g.weights, &mut m.weights, &mut v.weights);
        update(b, &g.bias, &mut m.bias, &mut v.bias);
    }
    Ok((next, next_state))
}
