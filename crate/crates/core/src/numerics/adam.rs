use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for an ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (first, second): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        OptimizerState {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// Restores a saved state; moment lists must pair up.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
    ) -> Result<Self> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("first and second moments differ in layout"));
        }
        Ok(OptimizerState {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// One bias-corrected Adam update; `params[i]` moves against `grads[i]`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || p.shape() != state.first[i].shape() {
            return Err(Error::shape(format!(
                "adam: parameter {i} has shape {:?}, gradient {} values, moment {:?}",
                p.shape(),
                g.len(),
                state.first[i].shape()
            )));
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
            let m_new = beta1 * f64::from(*mv) + (1.0 - beta1) * gv;
            let v_new = beta2 * f64::from(*vv) + (1.0 - beta2) * gv * gv;
            *mv = m_new as f32;
            *vv = v_new as f32;
            let update = learning_rate * (m_new / c1) / ((v_new / c2).sqrt() + epsilon);
            *w = (f64::from(*w) - update) as f32;
        }
    }
    Ok(())
}
