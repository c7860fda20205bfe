//! Variance schedule plus the closed-form forward noising and the ancestral
//! reverse step.
//!
//! Timesteps run `1..=T`; `t = 0` denotes clean data (`ᾱ_0 = 1`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const BASE_STEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Noise scale of the reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaPolicy {
    /// `σ_t = √β_t`.
    #[default]
    Ddpm,
    /// `σ_t = 0`: fully deterministic sampling.
    Zero,
}

impl FromStr for SigmaPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "zero" => Ok(Self::Zero),
            other => Err(Error::config(format!("unknown sigma policy `{other}`"))),
        }
    }
}

impl fmt::Display for SigmaPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ddpm => "ddpm",
            Self::Zero => "zero",
        })
    }
}

/// Parameters that reproduce a [`NoiseSchedule`]; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub base_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    pub fn linear(steps: usize) -> Self {
        Self {
            steps,
            base_steps: BASE_STEPS,
            beta_start: BETA_START,
            beta_end: BETA_END,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    sigma_policy: SigmaPolicy,
    /// Index 0 is unused padding so `betas[t]` reads naturally.
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    /// Position of each step on the base schedule, fed to the timestep embedding.
    base_timesteps: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β` from 1e-4 to 0.02 over 1000 base steps, respaced to `steps`.
    pub fn new(steps: usize, sigma: SigmaPolicy) -> Result<Self> {
        Self::from_params(ScheduleParams::linear(steps), sigma)
    }

    /// Step `t` of the respaced schedule lands on base step `round(t·base/T)`;
    /// its `β` is chosen so that `ᾱ_t` equals the base `ᾱ` at that step.
    pub fn from_params(params: ScheduleParams, sigma: SigmaPolicy) -> Result<Self> {
        let ScheduleParams {
            steps,
            base_steps,
            beta_start,
            beta_end,
        } = params;
        if steps == 0 || steps > base_steps {
            return Err(Error::config(format!(
                "step count {steps} must be in 1..={base_steps}"
            )));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config("beta range must satisfy 0 < start <= end < 1"));
        }
        let base_bar: Vec<f64> = std::iter::once(1.0)
            .chain((0..base_steps).scan(1.0, |acc, i| {
                let frac = if base_steps == 1 { 0.0 } else { i as f64 / (base_steps - 1) as f64 };
                *acc *= 1.0 - (beta_start + (beta_end - beta_start) * frac);
                Some(*acc)
            }))
            .collect();

        let positions: Vec<usize> = (0..=steps)
            .map(|t| ((t * base_steps) as f64 / steps as f64).round() as usize)
            .collect();
        let alpha_bars: Vec<f64> = positions.iter().map(|&p| base_bar[p]).collect();
        let mut betas = vec![0.0];
        betas.extend(alpha_bars.windows(2).map(|w| 1.0 - w[1] / w[0]));
        let mut schedule = Self {
            params,
            sigma_policy: sigma,
            betas,
            alpha_bars,
            sigmas: Vec::new(),
            base_timesteps: positions.iter().map(|&p| p as f64).collect(),
        };
        schedule.set_sigma_policy(sigma);
        Ok(schedule)
    }

    /// Builds a schedule from explicit `β_1..β_T`.
    pub fn from_betas(betas: &[f64], sigma: SigmaPolicy) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        let steps = betas.len();
        let mut alpha_bars = vec![1.0];
        for &b in betas {
            let last = *alpha_bars.last().unwrap();
            alpha_bars.push(last * (1.0 - b));
        }
        let mut schedule = Self {
            params: ScheduleParams {
                steps,
                base_steps: steps,
                beta_start: betas[0],
                beta_end: betas[steps - 1],
            },
            sigma_policy: sigma,
            betas: std::iter::once(0.0).chain(betas.iter().copied()).collect(),
            alpha_bars,
            sigmas: Vec::new(),
            base_timesteps: (0..=steps).map(|t| t as f64).collect(),
        };
        schedule.set_sigma_policy(sigma);
        Ok(schedule)
    }

    pub fn set_sigma_policy(&mut self, sigma: SigmaPolicy) {
        self.sigma_policy = sigma;
        self.sigmas = match sigma {
            SigmaPolicy::Ddpm => self.betas.iter().map(|b| b.sqrt()).collect(),
            SigmaPolicy::Zero => vec![0.0; self.betas.len()],
        };
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn sigma_policy(&self) -> SigmaPolicy {
        self.sigma_policy
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn base_timestep(&self, t: usize) -> f64 {
        self.base_timesteps[t]
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(Error::Timestep {
                t,
                min,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `x0·√ᾱ_t + eps·√(1−ᾱ_t)` for a given `eps`.
    pub fn noise_to(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t, 0)?;
        let a = self.alpha_bar(t).sqrt() as f32;
        let b = (1.0 - self.alpha_bar(t)).sqrt() as f32;
        x0.zip_map(eps, "noise_to", |x, e| x * a + e * b)
    }

    /// Samples `eps ~ N(0, I)` and returns `(x_t, eps)`.
    pub fn forward_diffuse(&self, x0: &Tensor, t: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        self.check_t(t, 0)?;
        let eps = rng.normal_tensor(x0.shape());
        let xt = self.noise_to(x0, t, &eps)?;
        Ok((xt, eps))
    }

    /// One ancestral step `x_t → x_{t−1}`. No noise is drawn at `t = 1`.
    pub fn reverse_step(&self, xt: &Tensor, eps_pred: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor> {
        self.check_t(t, 1)?;
        xt.ensure_same_shape(eps_pred, "reverse_step")?;
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        let eps_coef = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let sigma = if t > 1 { self.sigma(t) } else { 0.0 };
        let mut out = xt.zip_map(eps_pred, "reverse_step", |x, e| {
            (inv_sqrt_alpha * (x as f64 - eps_coef * e as f64)) as f32
        })?;
        if sigma > 0.0 {
            for v in out.data_mut() {
                *v = (*v as f64 + sigma * rng.normal()) as f32;
            }
        }
        Ok(out)
    }
}
