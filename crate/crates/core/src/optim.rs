//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamConfig, m: Vec<f64>, v: Vec<f64>, t: u64) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: m.len(),
                found: v.len(),
            });
        }
        Ok(Self { config, m, v, t })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Number of updates applied so far.
    pub fn updates(&self) -> u64 {
        self.t
    }

    /// Applies one update with learning rate `lr` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                found: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_about_lr() {
        // loss p^2 at p = 1: gradient 2, m_hat = 2, v_hat = 4
        let mut adam = Adam::new(1, AdamConfig::default());
        let mut p = [1.0];
        adam.step(&mut p, &[2.0], 0.1).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = [3.0, -2.0];
        for _ in 0..3000 {
            let g = [2.0 * p[0], 2.0 * (p[1] - 1.0)];
            adam.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p[0].abs() < 1e-2 && (p[1] - 1.0).abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn shape_checks() {
        let mut adam = Adam::new(2, AdamConfig::default());
        assert!(adam.step(&mut [0.0], &[0.0, 0.0], 0.1).is_err());
        assert!(Adam::from_state(AdamConfig::default(), vec![0.0], vec![], 0).is_err());
        assert!(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        }
        .validate()
        .is_err());
    }
}
