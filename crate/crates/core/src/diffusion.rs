//! Closed-form Gaussian diffusion: variance schedules, forward noising,
//! the posterior mean, the simplified ε objective, and the two reverse
//! updates (ancestral and DDIM).
//!
//! Steps are 1-based: `t ∈ 1..=T`, with `ᾱ_0 = 1` so that step 0 denotes
//! clean data.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, LatentGrid};

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("schedule domain error: {0}")]
    ScheduleDomain(String),
    #[error("step {t} outside valid range {min}..={max}")]
    StepOutOfRange { t: usize, min: usize, max: usize },
    #[error("previous step {t_prev} must be below current step {t}")]
    StepOrder { t: usize, t_prev: usize },
    #[error("eta must lie in [0, 1], got {0}")]
    InvalidEta(f64),
    #[error("final reverse step (t = 1) must be noiseless")]
    NoiseAtFinalStep,
    #[error("cannot build a ladder of {n_steps} steps over {total} steps")]
    InvalidLadder { total: usize, n_steps: usize },
    #[error(transparent)]
    Shape(#[from] GridError),
}

/// Reverse-step noise scale used by [`ddpm_step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// σ_t = √β_t.
    #[default]
    Standard,
    /// σ_t = √(1 − ᾱ_t), the marginal noise level at step t.
    Marginal,
}

impl SigmaMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SigmaMode::Standard => "standard",
            SigmaMode::Marginal => "marginal",
        }
    }
}

impl std::str::FromStr for SigmaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(SigmaMode::Standard),
            "marginal" => Ok(SigmaMode::Marginal),
            other => Err(format!("unknown sigma mode `{other}`")),
        }
    }
}

/// Immutable β/α/ᾱ tables. Index `t - 1` holds step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma_mode: SigmaMode,
}

impl NoiseSchedule {
    /// Linear β schedule, endpoints inclusive.
    pub fn linear(
        total_steps: usize,
        beta_start: f64,
        beta_end: f64,
        sigma_mode: SigmaMode,
    ) -> Result<Self, DiffusionError> {
        if total_steps == 0 {
            return Err(DiffusionError::ScheduleDomain(
                "total steps must be at least 1".into(),
            ));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::ScheduleDomain(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if total_steps == 1 {
            vec![beta_start]
        } else {
            let span = (total_steps - 1) as f64;
            (0..total_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        Self::from_betas(betas, sigma_mode)
    }

    pub fn from_betas(betas: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::ScheduleDomain(
                "total steps must be at least 1".into(),
            ));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::ScheduleDomain(format!(
                "beta {b} outside (0, 1)"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if acc <= 0.0 {
            return Err(DiffusionError::ScheduleDomain(
                "cumulative alpha underflowed to zero".into(),
            ));
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigma_mode,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.sigma_mode = mode;
        self
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.total_steps() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                min: 1,
                max: self.total_steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Ancestral noise scale σ_t under the configured mode.
    pub fn sigma(&self, t: usize) -> f64 {
        match self.sigma_mode {
            SigmaMode::Standard => self.beta(t).sqrt(),
            SigmaMode::Marginal => (1.0 - self.alpha_bar(t)).sqrt(),
        }
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`
pub fn forward_diffuse(
    x0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid, DiffusionError> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())?)
}

/// Draws `eps ~ N(0, I)` and returns `(x_t, eps)`.
pub fn sample_forward<R: Rng + ?Sized>(
    x0: &LatentGrid,
    t: usize,
    rng: &mut R,
    schedule: &NoiseSchedule,
) -> Result<(LatentGrid, LatentGrid), DiffusionError> {
    schedule.check_step(t)?;
    let (c, h, w) = x0.shape();
    let eps = LatentGrid::standard_normal(c, h, w, rng);
    let xt = forward_diffuse(x0, t, &eps, schedule)?;
    Ok((xt, eps))
}

/// `(x_t − β_t/√(1−ᾱ_t)·eps_hat)/√α_t`
pub fn posterior_mean(
    xt: &LatentGrid,
    t: usize,
    eps_hat: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid, DiffusionError> {
    schedule.check_step(t)?;
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    Ok(xt.axpby(inv_sqrt_alpha, eps_hat, -eps_coef * inv_sqrt_alpha)?)
}

/// One ancestral step `x_t → x_{t−1}`. `z` must be all zeros at `t = 1`.
pub fn ddpm_step(
    xt: &LatentGrid,
    t: usize,
    eps_hat: &LatentGrid,
    z: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid, DiffusionError> {
    let mean = posterior_mean(xt, t, eps_hat, schedule)?;
    mean.ensure_same_shape(z)?;
    if t == 1 {
        if z.values().iter().any(|v| *v != 0.0) {
            return Err(DiffusionError::NoiseAtFinalStep);
        }
        return Ok(mean);
    }
    Ok(mean.axpby(1.0, z, schedule.sigma(t))?)
}

/// Inverts the forward marginal: `(x_t − √(1−ᾱ_t)·eps_hat)/√ᾱ_t`.
pub fn predict_x0(
    xt: &LatentGrid,
    t: usize,
    eps_hat: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid, DiffusionError> {
    if t > schedule.total_steps() {
        return Err(DiffusionError::StepOutOfRange {
            t,
            min: 0,
            max: schedule.total_steps(),
        });
    }
    let ab = schedule.alpha_bar(t);
    let inv = 1.0 / ab.sqrt();
    Ok(xt.axpby(inv, eps_hat, -(1.0 - ab).sqrt() * inv)?)
}

/// DDIM noise scale between `t` and `t_prev` for a given `eta`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).max(0.0).sqrt()
}

/// Generalized DDIM update `x_t → x_{t_prev}`. With `eta = 0` the result
/// is deterministic and `z` is never read.
pub fn ddim_step(
    xt: &LatentGrid,
    t: usize,
    t_prev: usize,
    eps_hat: &LatentGrid,
    schedule: &NoiseSchedule,
    eta: f64,
    z: &LatentGrid,
) -> Result<LatentGrid, DiffusionError> {
    schedule.check_step(t)?;
    if t_prev >= t {
        return Err(DiffusionError::StepOrder { t, t_prev });
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(DiffusionError::InvalidEta(eta));
    }
    let x0_hat = predict_x0(xt, t, eps_hat, schedule)?;
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = ddim_sigma(schedule, t, t_prev, eta);
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let out = x0_hat.axpby(ab_prev.sqrt(), eps_hat, dir)?;
    if sigma == 0.0 {
        return Ok(out);
    }
    Ok(out.axpby(1.0, z, sigma)?)
}

/// Mean squared elementwise difference.
pub fn eps_mse_loss(eps: &LatentGrid, eps_hat: &LatentGrid) -> Result<f64, DiffusionError> {
    eps.ensure_same_shape(eps_hat)?;
    let sum: f64 = eps
        .values()
        .iter()
        .zip(eps_hat.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / eps.len() as f64)
}

/// Evenly spaced, strictly decreasing steps from `total` to 0 inclusive.
pub fn make_substep_ladder(total: usize, n_steps: usize) -> Result<Vec<usize>, DiffusionError> {
    if n_steps == 0 || n_steps > total {
        return Err(DiffusionError::InvalidLadder { total, n_steps });
    }
    Ok((0..=n_steps).rev().map(|k| total * k / n_steps).collect())
}
