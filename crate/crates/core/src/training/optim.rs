//! Adam with bias-corrected moments and per-tensor state.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    /// One entry per tensor, in the order tensors are passed to [`Adam::step`].
    pub moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self { config, t: 0, moments: shapes.iter().map(|&s| Moments { m: Array2::zeros(s), v: Array2::zeros(s) }).collect() }
    }

    /// Applies one update to every `(value, grad)` pair and zeroes the
    /// gradients. A non-finite gradient rejects the whole step: values and
    /// moments are left untouched, gradients are still cleared.
    pub fn step(&mut self, tensors: &mut [(&mut Array2<f64>, &mut Array2<f64>)]) -> Result<()> {
        if tensors.len() != self.moments.len() {
            return Err(Error::dims(self.moments.len(), tensors.len(), "optimizer tensor count"));
        }
        let bad = tensors.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite()));
        if bad {
            for (_, g) in tensors.iter_mut() {
                g.fill(0.0);
            }
            return Err(Error::NonFinite { name: "gradient".into() });
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for ((value, grad), mom) in tensors.iter_mut().zip(self.moments.iter_mut()) {
            ndarray::Zip::from(&mut **value).and(&mut **grad).and(&mut mom.m).and(&mut mom.v).for_each(|p, g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * *g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
                *g = 0.0;
            });
        }
        Ok(())
    }
}
