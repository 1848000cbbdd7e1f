use super::Param;
use std::collections::BTreeMap;

/// First/second moment buffers for one parameter.
#[derive(Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    value: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    assert_eq!(value.len(), grad.len(), "adam_step: value/grad length mismatch");
    assert_eq!(value.len(), state.m.len(), "adam_step: state length mismatch");
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for i in 0..value.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        value[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Adam over a named parameter set. States are keyed by parameter name, so
/// iteration order (and therefore arithmetic) is deterministic.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            states: BTreeMap::new(),
        }
    }

    /// Apply one step to `param` with its accumulated `grad` at rate `lr`.
    pub fn update(&mut self, param: &mut Param, grad: &[f64], lr: f64) {
        let state = self
            .states
            .entry(param.name().to_string())
            .or_insert_with(|| AdamState::new(param.len()));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        param.update(|v| adam_step(v, grad, state, lr, b1, b2, eps));
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}
