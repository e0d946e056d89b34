use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, slot_sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: slot_sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second: slot_sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn slot_sizes(&self) -> Vec<usize> {
        self.first.iter().map(Vec::len).collect()
    }
}

/// One bias-corrected Adam update over matching parameter/gradient slots.
pub fn adam_step(slots: Vec<(&mut [f64], &[f64])>, state: &mut AdamState) -> Result<()> {
    if slots.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} slots, got {}",
            state.first.len(),
            slots.len()
        )));
    }
    for (i, (p, g)) in slots.iter().enumerate() {
        if p.len() != g.len() || p.len() != state.first[i].len() {
            return Err(Error::Shape(format!("slot {i} size mismatch")));
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
    for ((p, g), (m, v)) in slots
        .into_iter()
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for (((pi, gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
