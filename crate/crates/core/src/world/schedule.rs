use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear beta schedule with cumulative signal retention `alpha_bar`.
///
/// Indexed by timestep `t = 0..=steps`; `alpha_bar(0) = 1` is the clean end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie strictly inside (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// Number of diffusion steps `T_d`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T_d`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `alpha_bar_t` for `t` in `0..=T_d`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// Evenly spaced decreasing timesteps from `T_d` to `0` in `n` reverse steps.
    pub fn reverse_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps() {
            return Err(Error::InvalidArgument(format!("reverse step count {n} outside 1..={}", self.steps())));
        }
        let td = self.steps();
        Ok((0..=n).map(|k| ((td * (n - k)) as f64 / n as f64).round() as usize).collect())
    }
}
