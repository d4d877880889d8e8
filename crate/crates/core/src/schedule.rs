//! Variance schedule of the forward noising process.
//!
//! Timesteps are 1-indexed at the API (`1..=T`); storage is 0-indexed.

use crate::error::{PdmError, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Immutable per-step `beta`, `alpha = 1 - beta` and cumulative `alpha_bar`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas, each in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(PdmError::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = beta.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(PdmError::InvalidRange(format!("beta[{}] = {b} not in (0, 1)", i + 1)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        if let Some(i) = alpha.iter().position(|&a| a == 1.0) {
            return Err(PdmError::InvalidRange(format!("beta[{}] = {} is below f64 resolution at 1", i + 1, beta[i])));
        }
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(PdmError::IndexOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    /// Reverse-step noise scale `sqrt(1 - alpha_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigma_sq(t)?.sqrt())
    }

    /// Reverse-step noise variance. Returns the stored `beta_t`, so
    /// `sigma_sq(t) + alpha(t)` rounds to exactly 1.
    pub fn sigma_sq(&self, t: usize) -> Result<f64> {
        self.beta(t)
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule constants are valid")
    }
}

/// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(PdmError::InvalidRange("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(PdmError::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps).map(|i| beta_start + span * i as f64 / (steps - 1) as f64).collect()
    };
    NoiseSchedule::from_betas(beta)
}
