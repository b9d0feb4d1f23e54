//! Noise schedule, forward noising and the ancestral reverse step.

mod denoiser;
mod gmm;

pub use denoiser::{train_mlp_denoiser, DenoiserModel, DenoiserTrainConfig, MlpDenoiser, TrainReport};
pub use gmm::{Gmm, GmmFitConfig, GmmPosterior};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Linear β schedule over `t = 1..=T` with the convention `ᾱ₀ = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            alpha_bar.push(alpha_bar.last().unwrap() * a);
        }
        Ok(NoiseSchedule {
            steps,
            beta_start,
            beta_end,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// The 1000-step linear schedule `1e-4 → 0.02` compressed to `steps`
    /// steps, so that the total noise injected stays comparable.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let s = 1000.0 / steps.max(1) as f64;
        Self::new(steps, 1e-4 * s, (0.02 * s).min(0.5))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::invalid(format!("timestep {t} outside {min}..={}", self.steps)));
        }
        Ok(())
    }

    /// `β_t` for `t = 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Coefficients `(c_z, c_x0, c_noise)` of the reverse update at `t`.
    pub fn ancestral_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_t(t, 1)?;
        let (ab, ab_prev, a, b) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.alpha(t), self.beta(t));
        Ok((
            a.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            ab_prev.sqrt() * b / (1.0 - ab),
            ((1.0 - ab_prev) * b / (1.0 - ab)).sqrt(),
        ))
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("schedule.steps", self.steps.to_string());
        ckpt.set_meta("schedule.beta_start", format!("{:e}", self.beta_start));
        ckpt.set_meta("schedule.beta_end", format!("{:e}", self.beta_end));
    }

    pub fn load(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(
            ckpt.meta_parse("schedule.steps")?,
            ckpt.meta_parse("schedule.beta_start")?,
            ckpt.meta_parse("schedule.beta_end")?,
        )
    }
}

pub fn standard_normal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`; returns `(z_t, ε)`.
pub fn forward_noise(
    z0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_t(t, 0)?;
    let eps = standard_normal(z0.len(), rng);
    let ab = schedule.alpha_bar(t);
    let zt = z0.iter().zip(&eps).map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e).collect();
    Ok((zt, eps))
}

/// Reverse update toward `z'_{t−1}` with caller-supplied noise `n`.
/// At `t = 1` the noise coefficient is zero.
pub fn ancestral_step(z_t: &[f64], z0_hat: &[f64], t: usize, schedule: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    if z0_hat.len() != z_t.len() || noise.len() != z_t.len() {
        return Err(Error::Dimension {
            what: "ancestral step operand",
            expected: z_t.len(),
            actual: if z0_hat.len() != z_t.len() { z0_hat.len() } else { noise.len() },
        });
    }
    let (cz, cx, cn) = schedule.ancestral_coefficients(t)?;
    Ok(z_t
        .iter()
        .zip(z0_hat)
        .zip(noise)
        .map(|((z, x), n)| cz * z + cx * x + cn * n)
        .collect())
}

/// Unguided ancestral sampling from `z_T ~ N(0, I)` down to `z_0`.
pub fn sample_prior(denoiser: &DenoiserModel, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut z = standard_normal(denoiser.latent_dim(), rng);
    for t in (1..=schedule.steps()).rev() {
        let z0 = denoiser.denoise_z0(&z, t, schedule)?;
        let n = standard_normal(z.len(), rng);
        z = ancestral_step(&z, &z0, t, schedule, &n)?;
    }
    Ok(z)
}
