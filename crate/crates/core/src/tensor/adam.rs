//! Adam optimizer with bias correction.

use std::collections::HashMap;

use super::{ParameterSet, Result, TensorError};

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.moments.get(name)
    }

    pub fn set_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) {
        self.moments.insert(name.to_string(), (m, v));
    }
}

/// One Adam update over every trainable parameter that carries a gradient.
/// Parameters are swept in their insertion order, so the update is
/// deterministic.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let names: Vec<String> = params
        .iter()
        .filter(|p| p.trainable && p.tensor.grad().is_some())
        .map(|p| p.name.clone())
        .collect();

    for name in names {
        let param = params.get_mut(&name)?;
        let n = param.tensor.values().len();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n || v.len() != n {
            return Err(TensorError::StaleOptimizerState { name });
        }
        let grad = param.tensor.grad().expect("filtered above").to_vec();
        let values = param.tensor.values_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
