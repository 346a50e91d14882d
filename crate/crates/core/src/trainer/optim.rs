//! AdamW with decoupled weight decay and a triangular cyclic learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Triangular wave between `lr_min` and `lr_max`, starting at the minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub lr_min: f64,
    pub lr_max: f64,
    pub half_period: u64,
}

impl CyclicLr {
    pub fn at(&self, step: u64) -> f64 {
        let h = self.half_period.max(1);
        let phase = step % (2 * h);
        let frac = if phase <= h { phase as f64 / h as f64 } else { (2 * h - phase) as f64 / h as f64 };
        self.lr_min + (self.lr_max - self.lr_min) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update. Entries with `frozen[i] == true` are left untouched
/// (no moment update, no decay).
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    frozen: Option<&[bool]>,
) -> Result<()> {
    ensure_dim(params.len(), grads.len())?;
    ensure_dim(params.len(), state.m.len())?;
    if let Some(f) = frozen {
        ensure_dim(params.len(), f.len())?;
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = params[i];
        params[i] = p - lr * weight_decay * p - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}
