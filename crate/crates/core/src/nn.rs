//! Parameter bookkeeping, the handful of layers the networks need, and the
//! Adam optimizer.
//!
//! Every parameter is a [`Var`] tagged with a [`ParamGroup`]. Layers built
//! from a frozen group receive detached tensors, so no gradient is ever
//! computed for them; the storage is still shared with the `Var`, which
//! keeps checkpoint loading in place.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, GroupNorm, Linear};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LatentTensor, PoseMask, ValueRange};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Image autoencoder; frozen once pretrained.
    Codec,
    /// Frozen human-prior feature extractor.
    HumanPriorBackbone,
    /// Learned reduction from human-prior features to latent shape.
    EgoReduction,
    /// Frozen image backbone of the concept pathway.
    ConceptBackbone,
    /// Trainable summarizer used when the concept backbone is unavailable.
    ConceptFallback,
    /// Projection / query decoder into cross-attention tokens.
    ConceptProjection,
    ControlBranch,
    Denoiser,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Codec,
        ParamGroup::HumanPriorBackbone,
        ParamGroup::EgoReduction,
        ParamGroup::ConceptBackbone,
        ParamGroup::ConceptFallback,
        ParamGroup::ConceptProjection,
        ParamGroup::ControlBranch,
        ParamGroup::Denoiser,
    ];

    pub fn trainable_by_default(&self) -> bool {
        !matches!(self, ParamGroup::Codec | ParamGroup::HumanPriorBackbone | ParamGroup::ConceptBackbone)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupCensus {
    pub group: ParamGroup,
    pub trainable: bool,
    pub tensors: usize,
    pub elements: usize,
}

/// Owns every parameter of a model, keyed by dotted name.
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    device: Device,
    dtype: DType,
    rng: ChaCha8Rng,
    frozen: BTreeMap<ParamGroup, bool>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    /// Normal with the given std.
    Normal(f64),
    Const(f64),
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            device,
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen: ParamGroup::ALL.iter().map(|g| (*g, !g.trainable_by_default())).collect(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        self.frozen.insert(group, !trainable);
        for p in self.params.values_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn group_trainable(&self, group: ParamGroup) -> bool {
        !self.frozen[&group]
    }

    /// Freezes individual parameters whose name matches `pred`.
    pub fn freeze_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.params.values_mut().filter(|p| pred(&p.name)) {
            p.trainable = false;
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.params.values()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn trainable(&self) -> Vec<&Param> {
        self.params.values().filter(|p| p.trainable).collect()
    }

    pub fn census(&self) -> Vec<GroupCensus> {
        let mut out: BTreeMap<(ParamGroup, bool), GroupCensus> = BTreeMap::new();
        for p in self.params.values() {
            let entry = out.entry((p.group, p.trainable)).or_insert(GroupCensus {
                group: p.group,
                trainable: p.trainable,
                tensors: 0,
                elements: 0,
            });
            entry.tensors += 1;
            entry.elements += p.var.elem_count();
        }
        out.into_values().collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.census().iter().filter(|c| c.trainable).map(|c| c.elements).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    fn init_tensor(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| self.rng.sample::<f64, _>(rand_distr::StandardNormal) * std)
                .collect(),
            Init::Const(c) => vec![c; n],
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Returns the parameter called `name`, creating it on first use.
    fn fetch(&mut self, name: &str, group: ParamGroup, shape: &[usize], init: Init) -> Result<Tensor> {
        if !self.params.contains_key(name) {
            let t = self.init_tensor(shape, init)?;
            let trainable = !self.frozen[&group];
            self.params.insert(
                name.to_string(),
                Param { name: name.to_string(), group, var: Var::from_tensor(&t)?, trainable },
            );
        }
        let p = &self.params[name];
        if p.var.dims() != shape {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` has shape {:?}, layer expects {shape:?}",
                p.var.dims()
            )));
        }
        if p.group != group {
            return Err(Error::InvalidInput(format!("parameter `{name}` registered in {:?}", p.group)));
        }
        Ok(if p.trainable { p.var.as_tensor().clone() } else { p.var.as_detached_tensor() })
    }

    /// Overwrites a parameter's value in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}`: stored {:?}, loaded {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    pub fn builder(&mut self, prefix: &str, group: ParamGroup) -> Builder<'_> {
        Builder { store: self, prefix: prefix.to_string(), group }
    }
}

/// Creates named layers under a prefix in one parameter group.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    group: ParamGroup,
}

impl Builder<'_> {
    pub fn pp(&mut self, sub: impl std::fmt::Display) -> Builder<'_> {
        Builder { store: self.store, prefix: format!("{}.{sub}", self.prefix), group: self.group }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn conv2d(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Result<Conv2d> {
        let fan_in = cin * kernel * kernel;
        let w = self.store.fetch(&self.name("weight"), self.group, &[cout, cin, kernel, kernel], Init::FanIn(fan_in))?;
        let b = self.store.fetch(&self.name("bias"), self.group, &[cout], Init::FanIn(fan_in))?;
        let cfg = Conv2dConfig { padding, stride, dilation: 1, groups: 1, cudnn_fwd_algo: None };
        Ok(Conv2d::new(w, Some(b), cfg))
    }

    /// 3x3, padding 1.
    pub fn conv3(&mut self, cin: usize, cout: usize, stride: usize) -> Result<Conv2d> {
        self.conv2d(cin, cout, 3, stride, 1)
    }

    /// Kernel 4, stride 2, padding 1: doubles the spatial size.
    pub fn conv_transpose_up(&mut self, cin: usize, cout: usize) -> Result<ConvTranspose2d> {
        let fan_in = cin * 16;
        let w = self.store.fetch(&self.name("weight"), self.group, &[cin, cout, 4, 4], Init::FanIn(fan_in))?;
        let b = self.store.fetch(&self.name("bias"), self.group, &[cout], Init::FanIn(fan_in))?;
        let cfg = ConvTranspose2dConfig { padding: 1, output_padding: 0, stride: 2, dilation: 1 };
        Ok(ConvTranspose2d::new(w, Some(b), cfg))
    }

    /// 1x1 convolution whose weight and bias start at exactly zero.
    pub fn zero_conv(&mut self, cin: usize, cout: usize) -> Result<Conv2d> {
        let w = self.store.fetch(&self.name("weight"), self.group, &[cout, cin, 1, 1], Init::Const(0.0))?;
        let b = self.store.fetch(&self.name("bias"), self.group, &[cout], Init::Const(0.0))?;
        Ok(Conv2d::new(w, Some(b), Conv2dConfig::default()))
    }

    pub fn linear(&mut self, cin: usize, cout: usize) -> Result<Linear> {
        let w = self.store.fetch(&self.name("weight"), self.group, &[cout, cin], Init::FanIn(cin))?;
        let b = self.store.fetch(&self.name("bias"), self.group, &[cout], Init::FanIn(cin))?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn linear_no_bias(&mut self, cin: usize, cout: usize) -> Result<Linear> {
        let w = self.store.fetch(&self.name("weight"), self.group, &[cout, cin], Init::FanIn(cin))?;
        Ok(Linear::new(w, None))
    }

    pub fn group_norm(&mut self, groups: usize, channels: usize) -> Result<GroupNorm> {
        let w = self.store.fetch(&self.name("weight"), self.group, &[channels], Init::Const(1.0))?;
        let b = self.store.fetch(&self.name("bias"), self.group, &[channels], Init::Const(0.0))?;
        Ok(GroupNorm::new(w, b, channels, compatible_groups(groups, channels), 1e-5)?)
    }

    pub fn layer_norm(&mut self, dim: usize) -> Result<LayerNorm> {
        let weight = self.store.fetch(&self.name("weight"), self.group, &[dim], Init::Const(1.0))?;
        let bias = self.store.fetch(&self.name("bias"), self.group, &[dim], Init::Const(0.0))?;
        Ok(LayerNorm { weight, bias, eps: 1e-5 })
    }

    /// Free tensor drawn from `N(0, std^2)`.
    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        self.store.fetch(&self.name(leaf), self.group, shape, Init::Normal(std))
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }
}

/// Layer normalisation over the last dimension, composed of primitive ops
/// so it differentiates in every dtype.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Largest divisor of `channels` not exceeding `groups`.
pub fn compatible_groups(groups: usize, channels: usize) -> usize {
    (1..=groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// `[B, C, H, W]` per-sample scaling by a `[B]` vector.
pub fn scale_per_sample(x: &Tensor, coeffs: &[f64]) -> Result<Tensor> {
    let b = coeffs.len();
    let c = Tensor::from_vec(coeffs.to_vec(), (b, 1, 1, 1), x.device())?.to_dtype(x.dtype())?;
    Ok(x.broadcast_mul(&c)?)
}

/// Nearest-neighbour 2x upsampling built from a broadcast, so its gradient
/// accumulates like any other op.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?.broadcast_as((b, c, h, 2, w, 2))?.reshape((b, c, 2 * h, 2 * w))?)
}

/// Stacks images (converted to `[-1, 1]`) into a `[B, C, H, W]` tensor.
pub fn images_to_tensor(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let shape = first.shape();
    let mut flat = Vec::with_capacity(images.len() * shape.0 * shape.1 * shape.2);
    for img in images {
        if img.shape() != shape {
            return Err(Error::ShapeMismatch(format!("image batch mixes {:?} and {:?}", shape, img.shape())));
        }
        flat.extend(img.to_range(ValueRange::SIGNED).data().iter().copied());
    }
    Ok(Tensor::from_vec(flat, (images.len(), shape.0, shape.1, shape.2), device)?.to_dtype(dtype)?)
}

/// Splits a `[B, C, H, W]` tensor into images, clamping into `[-1, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    Ok(tensor_to_arrays(t)?.into_iter().map(|a| ImageTensor::clamped(a, ValueRange::SIGNED)).collect())
}

pub fn masks_to_tensor(masks: &[&PoseMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::InvalidInput("empty mask batch".into()))?;
    let (h, w) = first.resolution();
    let mut flat = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.resolution() != (h, w) {
            return Err(Error::ShapeMismatch(format!("mask batch mixes {:?} and {:?}", (h, w), m.resolution())));
        }
        flat.extend(m.data().iter().copied());
    }
    Ok(Tensor::from_vec(flat, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

pub fn latents_to_tensor(latents: &[&LatentTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = latents.first().ok_or_else(|| Error::InvalidInput("empty latent batch".into()))?;
    let shape = first.shape();
    let mut flat = Vec::with_capacity(latents.len() * shape.0 * shape.1 * shape.2);
    for l in latents {
        if l.shape() != shape {
            return Err(Error::ShapeMismatch(format!("latent batch mixes {:?} and {:?}", shape, l.shape())));
        }
        flat.extend(l.data().iter().copied());
    }
    Ok(Tensor::from_vec(flat, (latents.len(), shape.0, shape.1, shape.2), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_latents(t: &Tensor, scale: f64) -> Result<Vec<LatentTensor>> {
    tensor_to_arrays(t)?.into_iter().map(|a| LatentTensor::new(a, scale)).collect()
}

fn tensor_to_arrays(t: &Tensor) -> Result<Vec<Array3<f64>>> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let per = c * h * w;
    (0..b)
        .map(|i| {
            Array3::from_shape_vec((c, h, w), flat[i * per..(i + 1) * per].to_vec())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))
        })
        .collect()
}

/// Multi-head cross-attention from spatial queries onto a token sequence.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl CrossAttention {
    pub fn new(b: &mut Builder<'_>, query_dim: usize, context_dim: usize, inner: usize, heads: usize) -> Result<Self> {
        if inner % heads != 0 {
            return Err(Error::InvalidInput(format!("attention width {inner} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: b.pp("q").linear_no_bias(query_dim, inner)?,
            k: b.pp("k").linear_no_bias(context_dim, inner)?,
            v: b.pp("v").linear_no_bias(context_dim, inner)?,
            out: b.pp("out").linear(inner, query_dim)?,
            heads,
            head_dim: inner / heads,
        })
    }

    /// `x: [B, N, query_dim]`, `context: [B, M, context_dim]`.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        let m = context.dim(1)?;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, self.heads, self.head_dim))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?, n)?;
        let k = split(self.k.forward(context)?, m)?;
        let v = split(self.v.forward(context)?, m)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (self.head_dim as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, self.heads * self.head_dim))?;
        Ok(self.out.forward(&y)?)
    }
}

/// Adam with bias correction; state is exposed so checkpoints can resume
/// exactly.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Per-parameter first and second moments, keyed by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }

    /// Applies one update to every trainable parameter that received a
    /// gradient. Gradients are rescaled to a global norm of at most `clip`.
    pub fn step(&mut self, store: &ParamStore, grads: &candle_core::backprop::GradStore, clip: Option<f64>) -> Result<f64> {
        let mut present = Vec::new();
        let mut sq = 0.0;
        for p in store.trainable() {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                present.push((p, g.detach()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::InvalidInput("non-finite gradient norm".into()));
        }
        let factor = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (p, g) in present {
            let g = (g * factor)?;
            let (m, v) = match self.moments.remove(&p.name) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            p.var.set(&(p.var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.moments.insert(p.name.clone(), (m, v));
        }
        Ok(norm)
    }
}
