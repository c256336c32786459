//! Adam optimizer over MLP parameters.

use crate::error::{Error, Result};
use crate::net::MlpParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment buffers aligned with the flat parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        OptimizerState {
            config,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update from the gradients currently stored in `params`.
pub fn adam_step(state: &mut OptimizerState, params: &mut MlpParams) -> Result<()> {
    let grads = params.flat_grads()?;
    if grads.len() != state.m.len() {
        return Err(Error::Dimension {
            context: "adam_step moments",
            expected: state.m.len(),
            got: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::non_finite("adam_step gradient"));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    let mut flat = params.flat();
    for i in 0..flat.len() {
        let g = grads[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        flat[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
    }
    params.set_flat(&flat)
}
