use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance schedule of the denoising diffusion decoder. Index `k` runs 1..=K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Posterior variances `β̃_k`; `β̃_1` (zero by formula) is set to `β_1`.
    pub posterior_vars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(k: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas: Vec<f64> = if k == 1 {
            vec![beta_start]
        } else {
            (0..k).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let posterior_vars = (0..betas.len())
            .map(|i| if i == 0 { betas[0] } else { (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i]) * betas[i] })
            .collect();
        Ok(Self { betas, alphas, alpha_bars, posterior_vars })
    }

    /// K=100, linear β from 1e-4 to 0.02.
    pub fn default_schedule() -> Self {
        Self::linear(100, 1e-4, 0.02).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k - 1]
    }

    pub fn sigma2(&self, k: usize) -> f64 {
        self.posterior_vars[k - 1]
    }

    /// Weight `β_k² / (2 Σ α_k (1 − ᾱ_k))` of the unsimplified objective.
    pub fn loss_weight(&self, k: usize) -> f64 {
        let b = self.beta(k);
        b * b / (2.0 * self.sigma2(k) * self.alpha(k) * (1.0 - self.alpha_bar(k)))
    }
}

/// `τᵏ = √ᾱ_k τ⁰ + √(1−ᾱ_k) ε`.
pub fn forward_marginal(tau0: f64, k: usize, schedule: &DiffusionSchedule, eps: f64) -> f64 {
    let ab = schedule.alpha_bar(k);
    ab.sqrt() * tau0 + (1.0 - ab).sqrt() * eps
}

/// Geometric noise levels with Langevin step sizes `α_k = ε σ_k² / σ_K²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLadder {
    pub sigmas: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub steps_per_level: usize,
}

impl NoiseLadder {
    pub fn geometric(levels: usize, sigma_max: f64, sigma_min: f64, eps: f64, steps_per_level: usize) -> Result<Self> {
        if levels < 2 || !(sigma_max > sigma_min) || !(sigma_min > 0.0) {
            return Err(Error::Config("noise ladder needs ≥2 strictly decreasing positive levels".into()));
        }
        let ratio = (sigma_min / sigma_max).powf(1.0 / (levels - 1) as f64);
        let sigmas: Vec<f64> = (0..levels).map(|i| sigma_max * ratio.powi(i as i32)).collect();
        let last = sigmas[levels - 1];
        let step_sizes = sigmas.iter().map(|s| eps * s * s / (last * last)).collect();
        Ok(Self { sigmas, step_sizes, steps_per_level })
    }

    /// 1000 levels from 1.0 to 0.01, `ε = 2e-5`, 5 steps per level.
    pub fn default_ladder() -> Self {
        Self::geometric(1000, 1.0, 0.01, 2e-5, 5).expect("valid default ladder")
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }
}
