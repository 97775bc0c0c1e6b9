use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ImageTensor, PoseMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_diff: f64,
    pub lambda_perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_diff: 1.0, lambda_perc: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_diff >= 0.0 && self.lambda_perc >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {} and {}",
                self.lambda_diff, self.lambda_perc
            )));
        }
        Ok(())
    }

    pub fn combine(&self, diff: f64, perc: f64) -> f64 {
        self.lambda_diff * diff + self.lambda_perc * perc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub diff: f64,
    pub perc: f64,
    /// `lambda_diff * diff + lambda_perc * perc`.
    pub total: f64,
}

#[derive(Debug)]
pub struct LossOutput {
    /// Scalar graph node to differentiate.
    pub total: Tensor,
    pub components: LossComponents,
}

/// One training example after augmentation.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub ego: &'a ImageTensor,
    pub frontal: &'a ImageTensor,
    pub mask: &'a PoseMask,
}

/// Stacked, validated tensors for one optimisation step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, 3, H, W]` in `[-1, 1]`.
    pub ego: Tensor,
    pub frontal: Tensor,
    /// `[B, 1, H, W]` in `[0, 1]`.
    pub mask: Tensor,
}

impl Batch {
    pub fn new(items: &[BatchItem<'_>], image_size: usize, dtype: DType, device: &Device) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        for it in items {
            let fail = |reason: String| Err(Error::InvalidSample { id: it.id.to_string(), reason });
            let want = (3, image_size, image_size);
            if it.frontal.shape() != want {
                return fail(format!("frontal image is {:?}, expected {want:?}", it.frontal.shape()));
            }
            if it.ego.shape() != want {
                return fail(format!("ego image is {:?}, expected {want:?}", it.ego.shape()));
            }
            if it.mask.resolution() != (image_size, image_size) {
                return fail(format!("pose mask is {:?}, expected {image_size}x{image_size}", it.mask.resolution()));
            }
            if it.mask.validate_foreground().is_err() {
                return fail("pose mask has no foreground".into());
            }
        }
        let egos: Vec<_> = items.iter().map(|i| i.ego).collect();
        let frontals: Vec<_> = items.iter().map(|i| i.frontal).collect();
        let masks: Vec<_> = items.iter().map(|i| i.mask).collect();
        Ok(Self {
            ids: items.iter().map(|i| i.id.to_string()).collect(),
            ego: nn::images_to_tensor(&egos, dtype, device)?,
            frontal: nn::images_to_tensor(&frontals, dtype, device)?,
            mask: nn::masks_to_tensor(&masks, dtype, device)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// What the compound loss needs from a model.
pub trait DiffusionModel {
    fn schedule(&self) -> &NoiseSchedule;
    /// Clean target latents `z0` for the batch's frontal images.
    fn target_latents(&self, batch: &Batch) -> Result<Tensor>;
    /// Noise prediction for `z_t`; `drop_concept[i]` blanks sample `i`'s
    /// concept tokens.
    fn predict(&self, z_t: &Tensor, t: &[usize], batch: &Batch, drop_concept: &[bool]) -> Result<Tensor>;
    fn decode_raw(&self, z: &Tensor) -> Result<Tensor>;
    /// Mean perceptual distance between two image batches (scalar).
    fn perceptual(&self, a: &Tensor, b: &Tensor) -> Result<Tensor>;
    fn concept_dropout(&self) -> f64 {
        0.0
    }
}

/// Random draws for one loss evaluation, all from one seeded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraws {
    pub t: Vec<usize>,
    pub eps: Vec<f64>,
    pub drop_concept: Vec<bool>,
}

impl LossDraws {
    pub fn new(seed: u64, batch: usize, latent_elems: usize, steps: usize, dropout: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = (0..batch).map(|_| rng.random_range(1..=steps)).collect();
        let eps = (0..batch * latent_elems).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let drop_concept = (0..batch).map(|_| dropout > 0.0 && rng.random::<f64>() < dropout).collect();
        Self { t, eps, drop_concept }
    }
}

/// `lambda_diff * ||eps_hat - eps||^2 + lambda_perc * P(decode(x0_hat), frontal)`
/// with one uniformly drawn timestep per sample.
pub fn compound_loss<M: DiffusionModel + ?Sized>(model: &M, batch: &Batch, weights: &LossWeights, seed: u64) -> Result<LossOutput> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let z0 = model.target_latents(batch)?.detach();
    let dims = z0.dims4()?;
    let schedule = model.schedule();
    let draws = LossDraws::new(seed, dims.0, dims.1 * dims.2 * dims.3, schedule.steps(), model.concept_dropout());
    let eps = Tensor::from_vec(draws.eps.clone(), dims, z0.device())?.to_dtype(z0.dtype())?;

    let ab: Vec<f64> = draws.t.iter().map(|&t| schedule.alpha_bar(t)).collect::<Result<_>>()?;
    let sqrt_ab: Vec<f64> = ab.iter().map(|a| a.sqrt()).collect();
    let sqrt_1m: Vec<f64> = ab.iter().map(|a| (1.0 - a).sqrt()).collect();
    let z_t = (nn::scale_per_sample(&z0, &sqrt_ab)? + nn::scale_per_sample(&eps, &sqrt_1m)?)?;

    let eps_hat = model.predict(&z_t, &draws.t, batch, &draws.drop_concept)?;
    if eps_hat.dims() != z_t.dims() {
        return Err(Error::ShapeMismatch(format!("model predicted {:?} for {:?}", eps_hat.dims(), z_t.dims())));
    }
    let l_diff = (&eps_hat - &eps)?.sqr()?.mean_all()?;
    let diff = scalar(&l_diff)?;

    let (total, perc) = if weights.lambda_perc > 0.0 {
        let inv: Vec<f64> = sqrt_ab.iter().map(|s| 1.0 / s).collect();
        let x0_hat = nn::scale_per_sample(&(&z_t - nn::scale_per_sample(&eps_hat, &sqrt_1m)?)?, &inv)?;
        let image = model.decode_raw(&x0_hat)?;
        let l_perc = model.perceptual(&image, &batch.frontal)?;
        let perc = scalar(&l_perc)?;
        (((&l_diff * weights.lambda_diff)? + (l_perc * weights.lambda_perc)?)?, perc)
    } else {
        ((&l_diff * weights.lambda_diff)?, 0.0)
    };
    let components = LossComponents { diff, perc, total: weights.combine(diff, perc) };
    Ok(LossOutput { total, components })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Knows the clean latents, so it can return the exact noise.
    struct Oracle {
        schedule: NoiseSchedule,
        z0: Tensor,
    }

    impl DiffusionModel for Oracle {
        fn schedule(&self) -> &NoiseSchedule {
            &self.schedule
        }
        fn target_latents(&self, _: &Batch) -> Result<Tensor> {
            Ok(self.z0.clone())
        }
        fn predict(&self, z_t: &Tensor, t: &[usize], _: &Batch, _: &[bool]) -> Result<Tensor> {
            let ab: Vec<f64> = t.iter().map(|&t| self.schedule.alpha_bar(t).unwrap()).collect();
            let s: Vec<f64> = ab.iter().map(|a| a.sqrt()).collect();
            let inv: Vec<f64> = ab.iter().map(|a| 1.0 / (1.0 - a).sqrt()).collect();
            nn::scale_per_sample(&(z_t - nn::scale_per_sample(&self.z0, &s)?)?, &inv)
        }
        fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
            Ok(z.clone())
        }
        fn perceptual(&self, a: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok((a.sum_all()? * 0.0)?)
        }
    }

    fn batch() -> Batch {
        let s = crate::toy::generate(2, 1, 16, 1);
        let items: Vec<_> = s
            .iter()
            .map(|s| BatchItem { id: &s.subject.id, ego: &s.egos[0], frontal: &s.frontal, mask: &s.mask })
            .collect();
        Batch::new(&items, 16, DType::F64, &Device::Cpu).unwrap()
    }

    fn oracle() -> Oracle {
        Oracle {
            schedule: NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
            z0: Tensor::randn(0f64, 1.0, (2, 4, 2, 2), &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let out = compound_loss(&oracle(), &batch(), &LossWeights::default(), 3).unwrap();
        assert!(out.components.diff < 1e-20, "{:?}", out.components);
        assert_eq!(out.components.perc, 0.0);
        assert!(out.components.total < 1e-20);
    }

    #[test]
    fn weights_combine() {
        assert!((LossWeights::default().combine(0.5, 0.1) - 0.52).abs() < 1e-15);
        let w = LossWeights { lambda_diff: 1.0, lambda_perc: 0.0 };
        assert_eq!(w.combine(0.37, 123.0), 0.37);
        assert!(LossWeights { lambda_diff: -1.0, lambda_perc: 0.0 }.validate().is_err());
    }

    #[test]
    fn draws_are_seeded_and_uniform_over_range() {
        let a = LossDraws::new(4, 5000, 1, 10, 0.0);
        assert_eq!(a, LossDraws::new(4, 5000, 1, 10, 0.0));
        assert!(a.t.iter().all(|t| (1..=10).contains(t)));
        for v in 1..=10 {
            let n = a.t.iter().filter(|t| **t == v).count();
            assert!((400..600).contains(&n), "t={v}: {n}");
        }
        assert!(a.drop_concept.iter().all(|d| !d));
    }

    #[test]
    fn invalid_sample_is_named() {
        let s = crate::toy::generate(1, 1, 16, 1);
        let small = crate::toy::generate(1, 1, 8, 1);
        let items = [BatchItem { id: "bad-one", ego: &small[0].egos[0], frontal: &s[0].frontal, mask: &s[0].mask }];
        match Batch::new(&items, 16, DType::F32, &Device::Cpu) {
            Err(Error::InvalidSample { id, .. }) => assert_eq!(id, "bad-one"),
            other => panic!("{other:?}"),
        }
    }
}
