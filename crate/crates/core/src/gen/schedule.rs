use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Endpoints of the cosine schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Signal coefficient at the noisiest level.
    pub alpha_min: f64,
    /// Noise coefficient at the cleanest level; must exceed 1e-4.
    pub sigma_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            alpha_min: 1e-3,
            sigma_min: 1e-3,
        }
    }
}

/// One noise level of a variance-preserving process: `z = alpha * x + sigma * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub alpha: f64,
    pub sigma: f64,
}

/// Noise levels ordered along the reverse trajectory (noisiest first).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    levels: Vec<NoiseLevel>,
}

impl DiffusionSchedule {
    /// Cosine schedule `alpha = cos(pi/2 u)`, `sigma = sin(pi/2 u)` with `u`
    /// uniformly spaced between the clamped endpoints.
    pub fn cosine(steps: usize, cfg: &ScheduleConfig) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("ddim_steps must be >= 1".into()));
        }
        if !(cfg.alpha_min > 0.0 && cfg.alpha_min < 1.0) {
            return Err(Error::InvalidConfig("alpha_min must lie in (0, 1)".into()));
        }
        if !(cfg.sigma_min > 1e-4 && cfg.sigma_min < 1.0) {
            return Err(Error::InvalidConfig(
                "sigma_min must lie in (1e-4, 1)".into(),
            ));
        }
        let half_pi = std::f64::consts::FRAC_PI_2;
        let u_max = cfg.alpha_min.acos() / half_pi;
        let u_min = cfg.sigma_min.asin() / half_pi;
        if u_min >= u_max {
            return Err(Error::InvalidConfig(
                "schedule endpoints overlap (alpha_min/sigma_min too large)".into(),
            ));
        }
        let levels = (0..steps)
            .map(|i| {
                let u = if steps == 1 {
                    u_max
                } else {
                    u_max - (u_max - u_min) * i as f64 / (steps - 1) as f64
                };
                let (sigma, alpha) = (half_pi * u).sin_cos();
                NoiseLevel { alpha, sigma }
            })
            .collect();
        Ok(Self { levels })
    }

    /// Build a schedule from explicit signal coefficients; `sigma = sqrt(1 - alpha^2)`.
    pub fn from_alphas(alphas: &[f64]) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidConfig(
                "schedule needs at least one level".into(),
            ));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidConfig("alphas must lie in (0, 1]".into()));
        }
        if alphas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("alphas must strictly increase".into()));
        }
        let levels = alphas
            .iter()
            .map(|&alpha| NoiseLevel {
                alpha,
                sigma: (1.0 - alpha * alpha).max(0.0).sqrt(),
            })
            .collect();
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, index: usize) -> Result<NoiseLevel> {
        self.levels.get(index).copied().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "noise level {index} outside schedule of {} steps",
                self.levels.len()
            ))
        })
    }

    pub fn levels(&self) -> &[NoiseLevel] {
        &self.levels
    }
}
