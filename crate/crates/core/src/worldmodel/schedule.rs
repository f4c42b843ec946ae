use serde::{Deserialize, Serialize};

use super::WorldModelError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            ddim_steps: 50,
        }
    }
}

/// Linear-β diffusion schedule with cumulative signal fractions ᾱ.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub ddim_steps: usize,
}

impl DiffusionSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self, WorldModelError> {
        let t = cfg.train_steps;
        if t == 0 || cfg.ddim_steps == 0 || cfg.ddim_steps > t {
            return Err(WorldModelError::Schedule(format!(
                "need 1 <= ddim steps ({}) <= train steps ({t})",
                cfg.ddim_steps
            )));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_end < 1.0 && cfg.beta_start <= cfg.beta_end) {
            return Err(WorldModelError::Schedule(
                "β must satisfy 0 < start <= end < 1".into(),
            ));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(DiffusionSchedule {
            betas,
            alpha_bar,
            ddim_steps: cfg.ddim_steps,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε`.
    pub fn add_noise(
        &self,
        x0: &[f64],
        t: usize,
        eps: &[f64],
    ) -> Result<Vec<f64>, WorldModelError> {
        let ab = *self.alpha_bar.get(t).ok_or(WorldModelError::Timestep {
            t,
            steps: self.train_steps(),
        })?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Descending sampling timesteps, evenly spaced and ending at `T/S − 1`.
    pub fn ddim_timesteps(&self) -> Vec<usize> {
        let (t, s) = (self.train_steps(), self.ddim_steps);
        (0..s)
            .rev()
            .map(|i| ((i + 1) * t / s).saturating_sub(1))
            .collect()
    }
}

/// Deterministic DDIM update (η = 0): estimate x0 from `x` and `ε̂`, then
/// re-noise it to the level `ᾱ_prev`.
pub fn ddim_step(x: &[f64], eps_hat: &[f64], alpha_bar: f64, alpha_bar_prev: f64) -> Vec<f64> {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (pa, pb) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    x.iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let x0 = (x - sb * e) / sa;
            pa * x0 + pb * e
        })
        .collect()
}

/// Sinusoidal embedding of a diffusion timestep, `dim` values (sin half, cos half).
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half.max(1) as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
