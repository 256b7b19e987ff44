use serde::{Deserialize, Serialize};

use crate::io::exact_f64s;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in (0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidConfig(
                "eps must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the number of updates taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    #[serde(with = "exact_f64s")]
    pub m: Vec<f64>,
    #[serde(with = "exact_f64s")]
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ(1 − lr·λ)`, then `θ ← θ − lr · m̂ / (√v̂ + ε)`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *p *= decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
