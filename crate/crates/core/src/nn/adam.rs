use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults are `beta1 = 0`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamSet::zeros_like(params),
            v: ParamSet::zeros_like(params),
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    params.ensure_congruent(grads, "adam_step gradients")?;
    params.ensure_congruent(&state.m, "adam_step state")?;
    grads.ensure_finite()?;
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads.get(i);
        let m = state.m.get_mut(i);
        ndarray::Zip::from(&mut *m)
            .and(g)
            .for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
        let v = state.v.get_mut(i);
        ndarray::Zip::from(&mut *v)
            .and(g)
            .for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
        let (m, v) = (state.m.get(i), state.v.get(i));
        ndarray::Zip::from(params.get_mut(i))
            .and(m)
            .and(v)
            .for_each(|p, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
