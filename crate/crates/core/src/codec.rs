//! Image codec: pixels to latents and back, plus the human-prior encoder
//! used as an alternative ego-image path.

use std::path::PathBuf;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Conv2d, ConvTranspose2d};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Adam, ParamGroup, ParamStore};
use crate::tensor::{ImageTensor, LatentTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    /// Small conv autoencoder trained here, frozen before diffusion training.
    #[default]
    ToyAutoencoder,
    /// Same architecture with externally supplied frozen weights.
    PretrainedVaeAdapter,
    /// Ego images go through a frozen human-prior feature extractor and a
    /// learned strided reduction; targets still use the autoencoder.
    HumanPriorAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureExtractorKind {
    /// Features are the pixels themselves.
    Identity,
    /// Frozen randomly initialised conv stack with stride 2.
    #[default]
    StandIn,
    /// Stand-in architecture with weights read from `extractor_weights`.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSpec {
    pub kind: CodecKind,
    pub downsample_factor: usize,
    pub latent_channels: usize,
    /// Multiplied into latents after encoding, divided out before decoding.
    pub scale: f64,
    /// Hidden width of each downsampling stage; one per factor of two.
    pub widths: Vec<usize>,
    pub weights: Option<PathBuf>,
    pub extractor: FeatureExtractorKind,
    pub extractor_weights: Option<PathBuf>,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            kind: CodecKind::ToyAutoencoder,
            downsample_factor: 8,
            latent_channels: 4,
            scale: 1.0,
            widths: vec![32, 64, 64],
            weights: None,
            extractor: FeatureExtractorKind::StandIn,
            extractor_weights: None,
        }
    }
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(Error::Config(format!("downsample_factor {f} is not a power of two")));
        }
        if self.widths.len() != f.trailing_zeros() as usize {
            return Err(Error::Config(format!(
                "codec needs {} stage widths for factor {f}, got {}",
                f.trailing_zeros(),
                self.widths.len()
            )));
        }
        if self.latent_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("codec channel counts must be positive".into()));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("latent scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let f = self.downsample_factor;
        if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "resolution {height}x{width} not divisible by downsample factor {f}"
            )));
        }
        Ok((self.latent_channels, height / f, width / f))
    }
}

const IMAGE_CHANNELS: usize = 3;
const EXTRACTOR_WIDTH: usize = 16;

#[derive(Debug, Clone)]
struct Encoder {
    stages: Vec<(Conv2d, Conv2d)>,
    out: Conv2d,
}

impl Encoder {
    fn new(store: &mut ParamStore, spec: &CodecSpec) -> Result<Self> {
        let mut b = store.builder("codec.encoder", ParamGroup::Codec);
        let mut stages = Vec::new();
        let mut prev = IMAGE_CHANNELS;
        for (i, &w) in spec.widths.iter().enumerate() {
            stages.push((b.pp(format!("down{i}.0")).conv3(prev, w, 2)?, b.pp(format!("down{i}.1")).conv3(w, w, 1)?));
            prev = w;
        }
        let out = b.pp("out").conv3(prev, spec.latent_channels, 1)?;
        Ok(Self { stages, out })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (down, conv) in &self.stages {
            h = conv.forward(&down.forward(&h)?.silu()?)?.silu()?;
        }
        Ok(self.out.forward(&h)?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    input: Conv2d,
    stages: Vec<(ConvTranspose2d, Conv2d)>,
    out: Conv2d,
}

impl Decoder {
    fn new(store: &mut ParamStore, spec: &CodecSpec) -> Result<Self> {
        let mut b = store.builder("codec.decoder", ParamGroup::Codec);
        let last = *spec.widths.last().expect("validated");
        let input = b.pp("in").conv3(spec.latent_channels, last, 1)?;
        let mut stages = Vec::new();
        let mut prev = last;
        for i in (0..spec.widths.len()).rev() {
            let w = spec.widths[i.saturating_sub(1)];
            stages.push((b.pp(format!("up{i}.0")).conv_transpose_up(prev, w)?, b.pp(format!("up{i}.1")).conv3(w, w, 1)?));
            prev = w;
        }
        let out = b.pp("out").conv3(prev, IMAGE_CHANNELS, 1)?;
        Ok(Self { input, stages, out })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.input.forward(z)?.silu()?;
        for (up, conv) in &self.stages {
            h = conv.forward(&up.forward(&h)?.silu()?)?.silu()?;
        }
        Ok(self.out.forward(&h)?)
    }
}

#[derive(Debug, Clone)]
struct HumanPriorEncoder {
    /// `None` for the identity extractor.
    extractor: Option<(Conv2d, Conv2d)>,
    reduction: Conv2d,
}

impl HumanPriorEncoder {
    fn new(store: &mut ParamStore, spec: &CodecSpec) -> Result<Self> {
        let (extractor, channels, stride) = match spec.extractor {
            FeatureExtractorKind::Identity => (None, IMAGE_CHANNELS, 1),
            FeatureExtractorKind::StandIn | FeatureExtractorKind::External => {
                let mut b = store.builder("human_prior.extractor", ParamGroup::HumanPriorBackbone);
                let convs = (b.pp("0").conv3(IMAGE_CHANNELS, EXTRACTOR_WIDTH, 2)?, b.pp("1").conv3(EXTRACTOR_WIDTH, EXTRACTOR_WIDTH, 1)?);
                (Some(convs), EXTRACTOR_WIDTH, 2)
            }
        };
        if spec.extractor == FeatureExtractorKind::External {
            let path = spec.extractor_weights.as_ref().ok_or_else(|| {
                Error::VariantUnavailable("human-prior extractor weights not configured".into())
            })?;
            load_prefixed(store, path, "human_prior.extractor.")
                .map_err(|e| Error::VariantUnavailable(format!("human-prior extractor {}: {e}", path.display())))?;
        }
        let r = spec.downsample_factor / stride;
        if r == 0 {
            return Err(Error::Config("downsample factor smaller than the extractor stride".into()));
        }
        let reduction = store.builder("human_prior.reduction", ParamGroup::EgoReduction).conv2d(channels, spec.latent_channels, r, r, 0)?;
        Ok(Self { extractor, reduction })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let feats = match &self.extractor {
            None => x.clone(),
            Some((a, b)) => b.forward(&a.forward(x)?.silu()?)?,
        };
        Ok(self.reduction.forward(&feats)?)
    }
}

/// Built view over the codec parameters in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Codec {
    spec: CodecSpec,
    encoder: Encoder,
    decoder: Decoder,
    human_prior: Option<HumanPriorEncoder>,
}

impl Codec {
    /// Creates (or reuses) codec parameters. The pretrained adapter loads its
    /// weights here; a missing file is an error.
    pub fn new(store: &mut ParamStore, spec: &CodecSpec) -> Result<Self> {
        spec.validate()?;
        let encoder = Encoder::new(store, spec)?;
        let decoder = Decoder::new(store, spec)?;
        if spec.kind == CodecKind::PretrainedVaeAdapter {
            let path = spec
                .weights
                .as_ref()
                .ok_or_else(|| Error::VariantUnavailable("pretrained codec weights not configured".into()))?;
            load_prefixed(store, path, "codec.")
                .map_err(|e| Error::VariantUnavailable(format!("pretrained codec {}: {e}", path.display())))?;
        }
        let human_prior = match spec.kind {
            CodecKind::HumanPriorAdapter => Some(HumanPriorEncoder::new(store, spec)?),
            _ => None,
        };
        Ok(Self { spec: spec.clone(), encoder, decoder, human_prior })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::ShapeMismatch(format!("codec expects {IMAGE_CHANNELS} image channels, got {c}")));
        }
        self.spec.latent_shape(h, w).map(|_| ())
    }

    /// `[B, 3, H, W]` in `[-1, 1]` to scaled latents `[B, C, H/f, W/f]`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        Ok((self.encoder.forward(x)? * self.spec.scale)?)
    }

    /// Ego-image latents through whichever path the codec kind selects.
    pub fn encode_ego_tensor(&self, x: &Tensor) -> Result<Tensor> {
        match &self.human_prior {
            Some(_) => self.encode_human_prior_tensor(x),
            None => self.encode_tensor(x),
        }
    }

    pub fn encode_human_prior_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let hp = self
            .human_prior
            .as_ref()
            .ok_or_else(|| Error::VariantUnavailable("no human-prior extractor configured".into()))?;
        self.check_images(x)?;
        Ok((hp.forward(x)? * self.spec.scale)?)
    }

    /// Unclamped decoder output, used inside the loss.
    pub fn decode_raw_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.spec.latent_channels {
            return Err(Error::ShapeMismatch(format!(
                "latent has {c} channels, codec expects {}",
                self.spec.latent_channels
            )));
        }
        self.decoder.forward(&(z / self.spec.scale)?)
    }

    pub fn encode(&self, image: &ImageTensor, store: &ParamStore) -> Result<LatentTensor> {
        let x = nn::images_to_tensor(&[image], store.dtype(), store.device())?;
        single_latent(&self.encode_tensor(&x)?, self.spec.scale)
    }

    pub fn encode_human_prior(&self, image: &ImageTensor, store: &ParamStore) -> Result<LatentTensor> {
        let x = nn::images_to_tensor(&[image], store.dtype(), store.device())?;
        single_latent(&self.encode_human_prior_tensor(&x)?, self.spec.scale)
    }

    /// Decodes and clamps into `[-1, 1]`.
    pub fn decode(&self, latent: &LatentTensor, store: &ParamStore) -> Result<ImageTensor> {
        let z = nn::latents_to_tensor(&[latent], store.dtype(), store.device())?;
        Ok(nn::tensor_to_images(&self.decode_raw_tensor(&z)?)?.remove(0))
    }
}

fn single_latent(t: &Tensor, scale: f64) -> Result<LatentTensor> {
    Ok(nn::tensor_to_latents(t, scale)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AutoencoderTraining {
    fn default() -> Self {
        Self { steps: 400, batch_size: 8, learning_rate: 2e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AutoencoderReport {
    pub losses: Vec<f64>,
    /// `1 / std` of the unscaled latents of the training images.
    pub scale: f64,
}

/// Fits the autoencoder to `images` by pixel MSE, then freezes it and
/// calibrates the latent scale so encoded training images have unit std.
pub fn pretrain_autoencoder(
    store: &mut ParamStore,
    spec: &mut CodecSpec,
    images: &[&ImageTensor],
    opts: &AutoencoderTraining,
) -> Result<AutoencoderReport> {
    use rand::{Rng, SeedableRng};
    if images.is_empty() {
        return Err(Error::InvalidInput("no images to pretrain the codec on".into()));
    }
    spec.scale = 1.0;
    store.set_group_trainable(ParamGroup::Codec, true);
    let codec = Codec::new(store, spec)?;
    let all = nn::images_to_tensor(images, store.dtype(), store.device())?;
    let mut adam = Adam::new(opts.learning_rate);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let idx: Vec<u32> = (0..opts.batch_size.max(1)).map(|_| rng.random_range(0..images.len()) as u32).collect();
        let idx = Tensor::from_vec(idx, opts.batch_size.max(1), store.device())?;
        let x = all.index_select(&idx, 0)?;
        let y = codec.decoder.forward(&codec.encoder.forward(&x)?)?;
        let loss = (y - &x)?.sqr()?.mean_all()?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: losses.len() + 1 });
        }
        losses.push(value);
        adam.step(store, &loss.backward()?, Some(1.0))?;
    }
    store.set_group_trainable(ParamGroup::Codec, false);

    let z = codec.encoder.forward(&all)?.to_dtype(DType::F64)?;
    let mean = z.mean_all()?.to_scalar::<f64>()?;
    let var = z.affine(1.0, -mean)?.sqr()?.mean_all()?.to_scalar::<f64>()?;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    spec.scale = scale;
    Ok(AutoencoderReport { losses, scale })
}

/// Writes every parameter under `prefix` to a safetensors file.
pub fn export_prefixed(store: &ParamStore, path: &std::path::Path, prefix: &str) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = store
        .params()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| (p.name.clone(), p.var.as_tensor().clone()))
        .collect();
    candle_core::safetensors::save(&tensors.into_iter().collect(), path)?;
    Ok(())
}

/// Overwrites every parameter under `prefix` from a safetensors file.
pub fn load_prefixed(store: &ParamStore, path: &std::path::Path, prefix: &str) -> Result<()> {
    let loaded = candle_core::safetensors::load(path, store.device())?;
    let names: Vec<String> = store.params().filter(|p| p.name.starts_with(prefix)).map(|p| p.name.clone()).collect();
    for name in names {
        let t = loaded
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{} lacks tensor `{name}`", path.display())))?;
        store.assign(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn store() -> ParamStore {
        ParamStore::new(DType::F32, Device::Cpu, 3)
    }

    #[test]
    fn shape_contract() {
        let mut s = store();
        let codec = Codec::new(&mut s, &CodecSpec::default()).unwrap();
        let img = ImageTensor::filled(3, 64, 64, 0.0).unwrap();
        let z = codec.encode(&img, &s).unwrap();
        assert_eq!(z.shape(), (4, 8, 8));
        assert!(z.data().iter().all(|v| v.is_finite()));
        let back = codec.decode(&z, &s).unwrap();
        assert_eq!(back.shape(), (3, 64, 64));
        assert!(back.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let mut s = store();
        let codec = Codec::new(&mut s, &CodecSpec::default()).unwrap();
        let img = ImageTensor::filled(3, 60, 64, 0.0).unwrap();
        assert!(matches!(codec.encode(&img, &s), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn spec_validation() {
        let bad = CodecSpec { downsample_factor: 6, ..CodecSpec::default() };
        assert!(bad.validate().is_err());
        let short = CodecSpec { widths: vec![8, 8], ..CodecSpec::default() };
        assert!(short.validate().is_err());
    }

    #[test]
    fn decode_clamps() {
        let mut s = store();
        let codec = Codec::new(&mut s, &CodecSpec::default()).unwrap();
        let z = LatentTensor::filled((4, 8, 8), 1e4);
        let img = codec.decode(&z, &s).unwrap();
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(img.data().iter().any(|v| v.abs() == 1.0));
    }

    #[test]
    fn variants_share_shape_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.safetensors");
        let mut s = store();
        Codec::new(&mut s, &CodecSpec::default()).unwrap();
        export_prefixed(&s, &path, "codec.").unwrap();

        let img = ImageTensor::filled(3, 64, 64, 0.3).unwrap();
        for kind in [CodecKind::ToyAutoencoder, CodecKind::PretrainedVaeAdapter, CodecKind::HumanPriorAdapter] {
            let spec = CodecSpec { kind, weights: Some(path.clone()), ..CodecSpec::default() };
            let mut s = store();
            let codec = Codec::new(&mut s, &spec).unwrap();
            let x = nn::images_to_tensor(&[&img], DType::F32, &Device::Cpu).unwrap();
            assert_eq!(codec.encode_ego_tensor(&x).unwrap().dims(), &[1, 4, 8, 8]);
            assert_eq!(codec.encode(&img, &s).unwrap().shape(), (4, 8, 8));
        }
    }

    #[test]
    fn pretrained_adapter_loads_weights_or_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.safetensors");
        let mut src = ParamStore::new(DType::F32, Device::Cpu, 11);
        let toy = Codec::new(&mut src, &CodecSpec::default()).unwrap();
        export_prefixed(&src, &path, "codec.").unwrap();

        let spec = CodecSpec { kind: CodecKind::PretrainedVaeAdapter, weights: Some(path), ..CodecSpec::default() };
        let mut dst = store();
        let adapter = Codec::new(&mut dst, &spec).unwrap();
        let img = ImageTensor::filled(3, 64, 64, -0.4).unwrap();
        assert_eq!(adapter.encode(&img, &dst).unwrap(), toy.encode(&img, &src).unwrap());

        let missing = CodecSpec { weights: Some(dir.path().join("absent")), ..spec };
        assert!(matches!(Codec::new(&mut store(), &missing), Err(Error::VariantUnavailable(_))));
    }

    #[test]
    fn human_prior_requires_configuration() {
        let mut s = store();
        let codec = Codec::new(&mut s, &CodecSpec::default()).unwrap();
        let img = ImageTensor::filled(3, 64, 64, 0.0).unwrap();
        assert!(matches!(codec.encode_human_prior(&img, &s), Err(Error::VariantUnavailable(_))));
        let external = CodecSpec {
            kind: CodecKind::HumanPriorAdapter,
            extractor: FeatureExtractorKind::External,
            ..CodecSpec::default()
        };
        assert!(matches!(Codec::new(&mut store(), &external), Err(Error::VariantUnavailable(_))));
    }

    #[test]
    fn identity_extractor_is_a_strided_convolution() {
        let spec = CodecSpec {
            kind: CodecKind::HumanPriorAdapter,
            extractor: FeatureExtractorKind::Identity,
            downsample_factor: 4,
            widths: vec![4, 4],
            latent_channels: 2,
            scale: 1.0,
            ..CodecSpec::default()
        };
        let mut s = ParamStore::new(DType::F64, Device::Cpu, 5);
        let codec = Codec::new(&mut s, &spec).unwrap();
        let img = crate::toy::generate(1, 1, 16, 2).remove(0).frontal;
        let z = codec.encode_human_prior(&img, &s).unwrap();

        // Direct evaluation of a kernel-4 stride-4 convolution.
        let w = s.get("human_prior.reduction.weight").unwrap().var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bias = s.get("human_prior.reduction.bias").unwrap().var.as_tensor().to_vec1::<f64>().unwrap();
        let x = img.data();
        for o in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = bias[o];
                    for c in 0..3 {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                acc += w[((o * 3 + c) * 4 + ky) * 4 + kx] * x[[c, i * 4 + ky, j * 4 + kx]];
                            }
                        }
                    }
                    assert!((z.data()[[o, i, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn overfits_two_images() {
        let samples = crate::toy::generate(2, 1, 32, 8);
        let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.frontal).collect();
        let mut spec = CodecSpec { widths: vec![16, 16, 16], ..CodecSpec::default() };
        let mut s = store();
        let opts = AutoencoderTraining { steps: 300, batch_size: 2, learning_rate: 3e-3, seed: 1 };
        let report = pretrain_autoencoder(&mut s, &mut spec, &images, &opts).unwrap();
        assert!(report.scale > 0.0);
        let codec = Codec::new(&mut s, &spec).unwrap();
        for img in &images {
            let back = codec.decode(&codec.encode(img, &s).unwrap(), &s).unwrap();
            assert!(back.mse(img) < 1e-2, "mse {}", back.mse(img));
        }
        assert!(s.params().filter(|p| p.group == ParamGroup::Codec).all(|p| !p.trainable));
    }
}
