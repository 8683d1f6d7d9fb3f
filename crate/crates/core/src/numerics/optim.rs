use serde::{Deserialize, Serialize};

use super::param::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Bias-corrected Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One in-place update of every parameter in `store`. `step` counts
    /// from 1.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients, step: u64) -> Result<()> {
        adam_step(store, grads, self.lr, self.beta1, self.beta2, self.eps, step)
    }
}

pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Contract("adam step counter starts at 1".into()));
    }
    if grads.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    // validate before mutating anything
    for (id, p) in store.iter() {
        match grads.get(id) {
            Some(g) if g.len() == p.value.numel() => {}
            Some(g) => {
                return Err(Error::Contract(format!(
                    "gradient for `{}` has {} entries, expected {}",
                    p.name,
                    g.len(),
                    p.value.numel()
                )))
            }
            None => return Err(Error::Contract(format!("missing gradient for `{}`", p.name))),
        }
    }
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.get(id).unwrap();
        let p = store.get_mut(id);
        let values = p.value.data_mut();
        for i in 0..g.len() {
            p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g[i];
            p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
