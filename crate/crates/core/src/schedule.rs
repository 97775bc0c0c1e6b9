//! Forward noising, its algebraic inverse and the iterative sampler.
//!
//! Timesteps are 1-based throughout: `t` ranges over `1..=T`, and
//! `alpha_bar(t)` is the running product of `1 - beta_s` for `s <= t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Serializable parameters from which a linear schedule is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-step variances and their cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly interpolates `beta_start -> beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} -> {beta_end}"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let delta = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + delta * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas. Zero betas are accepted here
    /// (they give a noise-free step), negative or `>= 1` values are not.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
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

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `alpha_bar` extended with `alpha_bar(0) = 1`.
    fn alpha_bar_or_one(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    z0.ensure_same_shape(eps, "forward_noise z0/eps")?;
    let ab = schedule.alpha_bar(t)?;
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data() * signal + eps.data() * noise;
    Ok(LatentTensor::new(data, z0.scale())?)
}

/// Algebraic inverse of [`forward_noise`] given a noise estimate.
pub fn predict_x0_from_eps(
    z_t: &LatentTensor,
    eps_hat: &LatentTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    z_t.ensure_same_shape(eps_hat, "predict_x0_from_eps z_t/eps_hat")?;
    let ab = schedule.alpha_bar(t)?;
    let data = (z_t.data() - &(eps_hat.data() * (1.0 - ab).sqrt())) / ab.sqrt();
    LatentTensor::new(data, z_t.scale())
}

/// Strictly decreasing timesteps `1 + i * T / steps` for `i = steps-1 .. 0`;
/// always ends at 1.
pub fn timestep_subsequence(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > total {
        return Err(Error::InvalidInput(format!(
            "sampling steps must lie in 1..={total}, got {steps}"
        )));
    }
    Ok((0..steps).rev().map(|i| 1 + i * total / steps).collect())
}

/// Sinusoidal features of a timestep: `dim / 2` sines followed by cosines,
/// frequencies geometric from 1 down to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Anything that predicts the noise contained in `z_t`.
pub trait NoisePredictor<C: ?Sized> {
    fn predict_noise(&self, z_t: &LatentTensor, t: usize, conditioning: &C) -> Result<LatentTensor>;
}

impl<C: ?Sized, F> NoisePredictor<C> for F
where
    F: Fn(&LatentTensor, usize, &C) -> Result<LatentTensor>,
{
    fn predict_noise(&self, z_t: &LatentTensor, t: usize, conditioning: &C) -> Result<LatentTensor> {
        self(z_t, t, conditioning)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Stochastic DDPM posterior steps (generalised to strided subsequences).
    #[default]
    Ancestral,
    /// Deterministic strided stepping (no fresh noise after initialisation).
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    pub seed: u64,
    pub kind: SamplerKind,
    pub shape: (usize, usize, usize),
    /// Scale tag carried by the produced latent.
    pub latent_scale: f64,
}

/// Refines pure Gaussian noise into a clean latent by iterating the
/// denoiser over [`timestep_subsequence`].
pub fn sample<C: ?Sized, P: NoisePredictor<C> + ?Sized>(
    denoiser: &P,
    conditioning: &C,
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
) -> Result<LatentTensor> {
    let timesteps = timestep_subsequence(schedule.steps(), opts.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut z = LatentTensor::randn(opts.shape, &mut rng);

    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let eps_hat = denoiser.predict_noise(&z, t, conditioning)?;
        if eps_hat.shape() != z.shape() {
            return Err(Error::ShapeMismatch(format!(
                "denoiser returned {:?} for input {:?} at t={t}",
                eps_hat.shape(),
                z.shape()
            )));
        }
        let x0 = predict_x0_from_eps(&z, &eps_hat, t, schedule)?;
        let ab = schedule.alpha_bar_or_one(t);
        let ab_prev = schedule.alpha_bar_or_one(t_prev);

        let sigma = match opts.kind {
            SamplerKind::Ancestral if t_prev > 0 => {
                ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt()
            }
            _ => 0.0,
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = x0.data() * ab_prev.sqrt() + eps_hat.data() * dir;
        if sigma > 0.0 {
            let fresh = LatentTensor::randn(opts.shape, &mut rng);
            next = next + fresh.data() * sigma;
        }
        z = LatentTensor::new(next, opts.latent_scale)?;
    }
    Ok(z.with_scale(opts.latent_scale))
}
