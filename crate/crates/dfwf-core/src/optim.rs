//! Adam optimizer with bias correction.
//!
//! Moment state is kept in f64; updated parameters are snapped back to the
//! f32 grid so checkpoints stay exact (see [`Tensor::quantize_f32`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // desk-scale epoch count; the original protocol used 100
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 30,
            batch_size: 32,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(format!(
                "betas must lie in [0, 1), got beta1={} beta2={}",
                self.beta1, self.beta2
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every trainable parameter, consuming
/// the gradients accumulated in `params`.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            context: "adam_step",
            expected: format!("{} state slots", params.len()),
            got: format!("{}", state.m.len()),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        if state.m[i].shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                context: "adam_step",
                expected: format!("{:?}", p.value.shape()),
                got: format!("{:?}", state.m[i].shape()),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let value = p.value.data_mut();
        for ((value, g), (m, v)) in value
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *value -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        p.value.quantize_f32();
    }
    Ok(())
}
