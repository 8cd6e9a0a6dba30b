//! Variance-preserving forward diffusion.
//!
//! `beta(t) = beta_min + t (beta_max - beta_min)` and
//! `alpha_t = exp(-1/2 int_0^t beta(u) du)`, `sigma_t = sqrt(1 - alpha_t^2)`.
//! A clean action `a` is perturbed into `a_t = alpha_t a + sigma_t eps`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Smallest diffusion time used for training and sampling.
    pub t_min: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_min: 1e-3,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(beta_min: f64, beta_max: f64, t_min: f64) -> Result<Self> {
        let s = Self {
            beta_min,
            beta_max,
            t_min,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min.is_finite()) {
            return Err(Error::Config(format!("beta_min must be positive, got {}", self.beta_min)));
        }
        if !(self.beta_max > 0.0 && self.beta_max.is_finite()) {
            return Err(Error::Config(format!("beta_max must be positive, got {}", self.beta_max)));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!("t_min must lie in (0, 1), got {}", self.t_min)));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    fn log_alpha(&self, t: f64) -> f64 {
        -0.5 * (self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)
    }

    /// `(alpha_t, sigma_t)` without the domain check.
    pub(crate) fn coefficients(&self, t: f64) -> (f64, f64) {
        let la = self.log_alpha(t);
        // sigma^2 = 1 - exp(2 la), computed without cancellation near t = 0.
        (la.exp(), (-(2.0 * la).exp_m1()).sqrt())
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")));
        }
        Ok(self.coefficients(t))
    }

    pub fn perturb(&self, action: &[f64], t: f64, noise: &[f64]) -> Result<Vec<f64>> {
        check_dim(action.len(), noise.len())?;
        let (alpha, sigma) = self.alpha_sigma(t)?;
        Ok(action
            .iter()
            .zip(noise)
            .map(|(a, e)| alpha * a + sigma * e)
            .collect())
    }

    /// Uniform draw from `[t_min, 1]`.
    pub fn sample_time(&self, rng: &mut Rng) -> f64 {
        rng::uniform(rng, self.t_min, 1.0)
    }
}
