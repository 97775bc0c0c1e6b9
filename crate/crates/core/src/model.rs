//! The assembled ego-to-frontal model: codec, concept encoder, optional
//! control branch and denoiser over one parameter store.

use candle_core::{DType, Device, Tensor};

use crate::codec::{self, AutoencoderReport, Codec, CodecKind};
use crate::condition::{self, ConceptEncoder, ConceptSource, ConditioningBundle, ControlBranch};
use crate::config::RunConfig;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};
use crate::objective::{Batch, DiffusionModel, PerceptualNet};
use crate::schedule::{self, NoiseSchedule, SampleOptions, SamplerKind};
use crate::tensor::{ImageTensor, LatentTensor, PoseMask};

#[derive(Debug)]
pub struct EgoFront {
    config: RunConfig,
    pub store: ParamStore,
    schedule: NoiseSchedule,
    pub codec: Codec,
    pub concept: ConceptEncoder,
    pub control: Option<ControlBranch>,
    pub denoiser: Denoiser,
    pub perceptual: PerceptualNet,
}

/// Per-batch conditioning that does not depend on `z_t` or `t`.
#[derive(Debug, Clone)]
pub struct StaticConditioning {
    pub concept: Tensor,
    pub ego_latent: Tensor,
    pub mask: Tensor,
}

impl EgoFront {
    /// Builds every network with parameters seeded from the training seed.
    pub fn new(config: &RunConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, device.clone(), config.training.seed);
        Self::assemble(config.clone(), &mut store).map(|parts| parts.into_model(store))
    }

    fn assemble(config: RunConfig, store: &mut ParamStore) -> Result<Parts> {
        let codec = Codec::new(store, &config.codec)?;
        let concept = ConceptEncoder::new(store, &config.concept, config.denoiser.embed_dim)?;
        let control = if config.control.enabled {
            Some(ControlBranch::new(store, &config.denoiser, config.codec.downsample_factor)?)
        } else {
            None
        };
        let denoiser = Denoiser::new(store, &config.denoiser)?;
        let perceptual = PerceptualNet::new(&config.perceptual, store.dtype(), store.device())?;
        let schedule = config.schedule.build()?;
        Ok(Parts { config, schedule, codec, concept, control, denoiser, perceptual })
    }

    /// Re-reads every module from the store, picking up changed trainable
    /// flags or codec scale.
    pub fn rebuild(&mut self) -> Result<()> {
        let parts = Self::assemble(self.config.clone(), &mut self.store)?;
        self.schedule = parts.schedule;
        self.codec = parts.codec;
        self.concept = parts.concept;
        self.control = parts.control;
        self.denoiser = parts.denoiser;
        self.perceptual = parts.perceptual;
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn codec_scale(&self) -> f64 {
        self.config.codec.scale
    }

    pub fn set_codec_scale(&mut self, scale: f64) -> Result<()> {
        self.config.codec.scale = scale;
        self.rebuild()
    }

    pub fn concept_source(&self) -> ConceptSource {
        self.concept.source()
    }

    /// Fits the autoencoder on `images` and freezes it. A no-op for the
    /// pretrained adapter, whose weights come from outside.
    pub fn pretrain_codec(&mut self, images: &[&ImageTensor]) -> Result<Option<AutoencoderReport>> {
        if self.config.codec.kind == CodecKind::PretrainedVaeAdapter {
            return Ok(None);
        }
        let mut spec = self.config.codec.clone();
        let report = codec::pretrain_autoencoder(&mut self.store, &mut spec, images, &self.config.codec_training)?;
        self.config.codec.scale = spec.scale;
        self.rebuild()?;
        Ok(Some(report))
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.config
            .codec
            .latent_shape(self.config.image_size, self.config.image_size)
            .expect("validated at construction")
    }

    pub fn static_conditioning(&self, ego: &Tensor, mask: &Tensor, drop_concept: &[bool]) -> Result<StaticConditioning> {
        let mut concept = self.concept.forward(ego)?;
        if drop_concept.iter().any(|d| *d) {
            let keep: Vec<f64> = drop_concept.iter().map(|d| if *d { 0.0 } else { 1.0 }).collect();
            let keep = Tensor::from_vec(keep, (drop_concept.len(), 1, 1), ego.device())?.to_dtype(ego.dtype())?;
            concept = concept.broadcast_mul(&keep)?;
        }
        Ok(StaticConditioning { concept, ego_latent: self.codec.encode_ego_tensor(ego)?, mask: mask.clone() })
    }

    /// Control residuals for a fused latent, or `None` without a branch.
    pub fn control_residuals(&self, cond: &StaticConditioning, z_fused: &Tensor, temb: &Tensor) -> Result<Option<Vec<Tensor>>> {
        match &self.control {
            Some(c) => Ok(Some(c.forward(&cond.mask, z_fused, temb, &cond.concept)?)),
            None => Ok(None),
        }
    }

    pub fn bundle(&self, cond: &StaticConditioning, z_t: &Tensor, t: &[usize]) -> Result<(Tensor, Tensor, ConditioningBundle)> {
        let z_fused = condition::fuse_tensors(z_t, &cond.ego_latent)?;
        let temb = self.denoiser.time_embedding(t, z_t.dtype(), z_t.device())?;
        let control_residuals = self.control_residuals(cond, &z_fused, &temb)?;
        let bundle = ConditioningBundle { concept: cond.concept.clone(), control_residuals, ego_latent: cond.ego_latent.clone() };
        Ok((z_fused, temb, bundle))
    }

    /// Noise prediction for a batch of noised target latents.
    pub fn predict_with(&self, z_t: &Tensor, t: &[usize], cond: &StaticConditioning) -> Result<Tensor> {
        let (z_fused, temb, bundle) = self.bundle(cond, z_t, t)?;
        self.denoiser.forward(&z_fused, &temb, &bundle.concept, bundle.control_residuals.as_deref())
    }

    /// Control residuals for one mask and one fused latent.
    pub fn encode_pose_control(&self, mask: &PoseMask, ego: &ImageTensor, noised_input: &LatentTensor, t: usize) -> Result<Vec<LatentTensor>> {
        self.schedule.check_timestep(t)?;
        let dtype = self.store.dtype();
        let dev = self.store.device();
        let m = nn::masks_to_tensor(&[mask], dtype, dev)?;
        let e = nn::images_to_tensor(&[ego], dtype, dev)?;
        let cond = self.static_conditioning(&e, &m, &[false])?;
        let z = nn::latents_to_tensor(&[noised_input], dtype, dev)?;
        let z_fused = condition::fuse_tensors(&z, &cond.ego_latent)?;
        let temb = self.denoiser.time_embedding(&[t], dtype, dev)?;
        let res = self
            .control_residuals(&cond, &z_fused, &temb)?
            .ok_or_else(|| Error::VariantUnavailable("model has no control branch".into()))?;
        res.iter().map(|r| Ok(nn::tensor_to_latents(r, 1.0)?.remove(0))).collect()
    }

    /// Samples a frontal image for one ego image and target pose mask.
    pub fn generate(&self, ego: &ImageTensor, mask: &PoseMask, steps: usize, seed: u64, kind: SamplerKind) -> Result<ImageTensor> {
        let size = self.config.image_size;
        if ego.resolution() != (size, size) || mask.resolution() != (size, size) {
            return Err(Error::ShapeMismatch(format!(
                "inputs are {:?} / {:?}, model expects {size}x{size}",
                ego.resolution(),
                mask.resolution()
            )));
        }
        let dtype = self.store.dtype();
        let dev = self.store.device().clone();
        let e = nn::images_to_tensor(&[ego], dtype, &dev)?;
        let m = nn::masks_to_tensor(&[mask], dtype, &dev)?;
        let cond = self.static_conditioning(&e, &m, &[false])?;
        let guidance = self.config.sampler.guidance_scale;
        let uncond = if guidance != 1.0 { Some(self.static_conditioning(&e, &m, &[true])?) } else { None };
        let predictor = |z: &LatentTensor, t: usize, cond: &StaticConditioning| -> Result<LatentTensor> {
            let zt = nn::latents_to_tensor(&[z], dtype, &dev)?;
            let mut eps = self.predict_with(&zt, &[t], cond)?;
            if let Some(u) = &uncond {
                let eps_u = self.predict_with(&zt, &[t], u)?;
                eps = (&eps_u + ((&eps - &eps_u)? * guidance)?)?;
            }
            Ok(nn::tensor_to_latents(&eps, z.scale())?.remove(0))
        };
        let opts = SampleOptions { steps, seed, kind, shape: self.latent_shape(), latent_scale: self.codec_scale() };
        let z0 = schedule::sample(&predictor, &cond, &self.schedule, &opts)?;
        self.codec.decode(&z0, &self.store)
    }
}

struct Parts {
    config: RunConfig,
    schedule: NoiseSchedule,
    codec: Codec,
    concept: ConceptEncoder,
    control: Option<ControlBranch>,
    denoiser: Denoiser,
    perceptual: PerceptualNet,
}

impl Parts {
    fn into_model(self, store: ParamStore) -> EgoFront {
        EgoFront {
            config: self.config,
            store,
            schedule: self.schedule,
            codec: self.codec,
            concept: self.concept,
            control: self.control,
            denoiser: self.denoiser,
            perceptual: self.perceptual,
        }
    }
}

impl DiffusionModel for EgoFront {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn target_latents(&self, batch: &Batch) -> Result<Tensor> {
        self.codec.encode_tensor(&batch.frontal)
    }

    fn predict(&self, z_t: &Tensor, t: &[usize], batch: &Batch, drop_concept: &[bool]) -> Result<Tensor> {
        let cond = self.static_conditioning(&batch.ego, &batch.mask, drop_concept)?;
        self.predict_with(z_t, t, &cond)
    }

    fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        self.codec.decode_raw_tensor(z)
    }

    fn perceptual(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(self.perceptual.distance_tensor(a, b)?.mean_all()?)
    }

    fn concept_dropout(&self) -> f64 {
        self.config.denoiser.concept_dropout
    }
}
