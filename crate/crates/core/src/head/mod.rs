//! The parallel-hyperplane survival head.
//!
//! A single normal vector `w` is shared by a family of hyperplanes whose bias
//! depends affinely on normalized time, `b(t) = alpha * t + beta`. The signed
//! projection `r = w . f` is the risk score, and `sigmoid(r + b(t))` is the
//! probability of converting within `t`. The stage classifier is the `t = 0`
//! member of the family.

mod calibration;

pub use calibration::{percentile_linear, Calibrator, DECILE_KNOTS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperplaneHead {
    /// Shared hyperplane normal.
    pub w: Vec<f64>,
    /// Bias of the stage hyperplane.
    pub beta: f64,
    /// Unconstrained slope; the effective slope is `softplus(alpha_raw)`.
    pub alpha_raw: f64,
    /// Unconstrained ranking scale; the effective scale is `softplus(gamma_raw)`.
    pub gamma_raw: f64,
}

impl HyperplaneHead {
    /// Builds a head from effective (constrained) slope and ranking scale.
    pub fn with_effective(w: Vec<f64>, beta: f64, alpha: f64, gamma: f64) -> Self {
        Self {
            w,
            beta,
            alpha_raw: softplus_inv(alpha),
            gamma_raw: softplus_inv(gamma),
        }
    }

    /// Uniform `w` in `[-1/sqrt(d), 1/sqrt(d)]`, `beta = 0`, `alpha = gamma = 1`.
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        let w = (0..dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::with_effective(w, 0.0, 1.0, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.alpha_raw)
    }

    pub fn gamma(&self) -> f64 {
        softplus(self.gamma_raw)
    }

    pub fn risk(&self, f: &[f64]) -> Result<f64> {
        ensure_dim(self.w.len(), f.len())?;
        Ok(dot(&self.w, f))
    }

    pub fn bias_at(&self, t: f64) -> f64 {
        self.alpha() * t + self.beta
    }

    pub fn cdf_from_risk(&self, r: f64, t: f64) -> f64 {
        sigmoid(r + self.bias_at(t))
    }

    /// Probability of conversion within normalized time `t`.
    pub fn cdf_at(&self, f: &[f64], t: f64) -> Result<f64> {
        Ok(self.cdf_from_risk(self.risk(f)?, t))
    }

    /// Stage probability, i.e. the `t = 0` member of the family.
    pub fn stage_probability(&self, f: &[f64]) -> Result<f64> {
        self.cdf_at(f, 0.0)
    }
}
