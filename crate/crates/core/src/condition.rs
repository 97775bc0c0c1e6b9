//! Conditioning: concept tokens from the ego image, pose-control residuals
//! from the target mask, and fusion of the ego latent with the noised
//! target latent.

use std::path::PathBuf;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Conv2d, Linear};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserSpec, EncoderHalf};
use crate::error::{Error, Result};
use crate::nn::{Builder, CrossAttention, LayerNorm, ParamGroup, ParamStore};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptVariant {
    /// One token: linear projection of the backbone's global feature.
    #[default]
    GlobalCls,
    /// Learned queries cross-attending over the backbone's patch grid.
    GridDecoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptBackbone {
    /// Frozen randomly initialised patch encoder.
    #[default]
    StandIn,
    /// Stand-in architecture with weights from `backbone_weights`.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptSpec {
    pub variant: ConceptVariant,
    /// Token count of the grid decoder.
    pub queries: usize,
    pub backbone: ConceptBackbone,
    pub backbone_weights: Option<PathBuf>,
    /// Use a small trainable summarizer when the backbone cannot be loaded.
    pub fallback: bool,
    pub backbone_width: usize,
    pub patch_size: usize,
    pub heads: usize,
    /// Drop the grid positional encodings.
    pub zero_positions: bool,
}

impl Default for ConceptSpec {
    fn default() -> Self {
        Self {
            variant: ConceptVariant::GlobalCls,
            queries: 8,
            backbone: ConceptBackbone::StandIn,
            backbone_weights: None,
            fallback: true,
            backbone_width: 64,
            patch_size: 8,
            heads: 4,
            zero_positions: false,
        }
    }
}

/// Concept tokens for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding {
    /// `token_count x embed_dim`.
    pub tokens: Array2<f64>,
    pub variant: ConceptVariant,
}

/// Which backbone actually produced the features; recorded in run metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptSource {
    StandIn,
    External,
    Fallback,
}

#[derive(Debug, Clone)]
enum Backbone {
    Frozen { patch: Conv2d, mix: Conv2d, cls: Linear },
    Fallback { convs: (Conv2d, Conv2d) },
}

impl Backbone {
    /// Returns the global feature `[B, W]` and the patch grid `[B, N, W]`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let grid = match self {
            Backbone::Frozen { patch, mix, .. } => mix.forward(&patch.forward(x)?.gelu()?)?,
            Backbone::Fallback { convs } => convs.1.forward(&convs.0.forward(x)?.silu()?)?.silu()?,
        };
        let (b, c, h, w) = grid.dims4()?;
        let grid = grid.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let pooled = grid.mean(1)?;
        let global = match self {
            Backbone::Frozen { cls, .. } => cls.forward(&pooled)?,
            Backbone::Fallback { .. } => pooled,
        };
        Ok((global, grid))
    }
}

#[derive(Debug, Clone)]
struct GridDecoder {
    queries: Tensor,
    kv: Linear,
    attn: CrossAttention,
    norm1: LayerNorm,
    mlp: (Linear, Linear),
    norm2: LayerNorm,
}

impl GridDecoder {
    fn forward(&self, grid: &Tensor) -> Result<Tensor> {
        let b = grid.dim(0)?;
        let (q, e) = self.queries.dims2()?;
        let queries = self.queries.unsqueeze(0)?.broadcast_as((b, q, e))?.contiguous()?;
        let memory = self.kv.forward(grid)?;
        let h = self.norm1.forward(&(&queries + self.attn.forward(&queries, &memory)?)?)?;
        let m = self.mlp.1.forward(&self.mlp.0.forward(&h)?.gelu()?)?;
        Ok(self.norm2.forward(&(h + m)?)?)
    }
}

#[derive(Debug, Clone)]
enum Head {
    Global(Linear),
    Grid(GridDecoder),
}

/// Ego image to cross-attention tokens.
#[derive(Debug, Clone)]
pub struct ConceptEncoder {
    spec: ConceptSpec,
    embed_dim: usize,
    backbone: Backbone,
    source: ConceptSource,
    head: Head,
}

/// 2D sinusoidal encoding of a `gh x gw` grid, `[gh*gw, dim]`.
pub fn grid_positions(gh: usize, gw: usize, dim: usize) -> Vec<f64> {
    let quarter = (dim / 4).max(1);
    let mut out = vec![0.0; gh * gw * dim];
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut out[(y * gw + x) * dim..(y * gw + x + 1) * dim];
            for i in 0..quarter {
                let freq = (-(10000f64.ln()) * i as f64 / quarter as f64).exp();
                let slots = [(y as f64 * freq).sin(), (y as f64 * freq).cos(), (x as f64 * freq).sin(), (x as f64 * freq).cos()];
                for (k, v) in slots.iter().enumerate() {
                    if let Some(slot) = row.get_mut(k * quarter + i) {
                        *slot = *v;
                    }
                }
            }
        }
    }
    out
}

impl ConceptEncoder {
    pub fn new(store: &mut ParamStore, spec: &ConceptSpec, embed_dim: usize) -> Result<Self> {
        if spec.patch_size == 0 || spec.backbone_width == 0 || spec.heads == 0 {
            return Err(Error::Config("concept encoder sizes must be positive".into()));
        }
        if spec.variant == ConceptVariant::GridDecoder && spec.queries == 0 {
            return Err(Error::Config("grid decoder needs at least one query".into()));
        }
        let width = spec.backbone_width;
        let frozen = |store: &mut ParamStore| -> Result<Backbone> {
            let mut b = store.builder("concept.backbone", ParamGroup::ConceptBackbone);
            Ok(Backbone::Frozen {
                patch: b.pp("patch").conv2d(3, width, spec.patch_size, spec.patch_size, 0)?,
                mix: b.pp("mix").conv2d(width, width, 1, 1, 0)?,
                cls: b.pp("cls").linear(width, width)?,
            })
        };
        let (backbone, source) = match spec.backbone {
            ConceptBackbone::StandIn => (frozen(store)?, ConceptSource::StandIn),
            ConceptBackbone::External => {
                let loaded = match &spec.backbone_weights {
                    Some(path) => {
                        let bb = frozen(store)?;
                        crate::codec::load_prefixed(store, path, "concept.backbone.").map(|_| bb)
                    }
                    None => Err(Error::VariantUnavailable("concept backbone weights not configured".into())),
                };
                match loaded {
                    Ok(bb) => (bb, ConceptSource::External),
                    Err(_) if spec.fallback => {
                        let mut b = store.builder("concept.fallback", ParamGroup::ConceptFallback);
                        let convs = (b.pp("0").conv3(3, width / 2 + 1, 2)?, b.pp("1").conv3(width / 2 + 1, width, 2)?);
                        (Backbone::Fallback { convs }, ConceptSource::Fallback)
                    }
                    Err(e) => return Err(Error::VariantUnavailable(format!("concept backbone: {e}"))),
                }
            }
        };
        let mut b = store.builder("concept.head", ParamGroup::ConceptProjection);
        let head = match spec.variant {
            ConceptVariant::GlobalCls => Head::Global(b.pp("proj").linear_no_bias(width, embed_dim)?),
            ConceptVariant::GridDecoder => Head::Grid(build_grid_decoder(&mut b, spec, width, embed_dim)?),
        };
        Ok(Self { spec: spec.clone(), embed_dim, backbone, source, head })
    }

    pub fn source(&self) -> ConceptSource {
        self.source
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn token_count(&self) -> usize {
        match self.spec.variant {
            ConceptVariant::GlobalCls => 1,
            ConceptVariant::GridDecoder => self.spec.queries,
        }
    }

    /// Frozen backbone features (global, grid).
    pub fn features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.backbone.forward(x)
    }

    /// Decodes tokens from an explicit patch grid `[B, N, W]` laid out
    /// row-major over a `gh x gw` grid.
    pub fn tokens_from_grid(&self, grid: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
        let dec = match &self.head {
            Head::Grid(d) => d,
            Head::Global(_) => return Err(Error::InvalidInput("global variant has no grid decoder".into())),
        };
        let (_, n, w) = grid.dims3()?;
        if n != gh * gw {
            return Err(Error::ShapeMismatch(format!("grid of {n} tokens is not {gh}x{gw}")));
        }
        let grid = if self.spec.zero_positions {
            grid.clone()
        } else {
            let pos = Tensor::from_vec(grid_positions(gh, gw, w), (1, n, w), grid.device())?.to_dtype(grid.dtype())?;
            grid.broadcast_add(&pos)?
        };
        dec.forward(&grid)
    }

    /// `[B, 3, H, W]` to `[B, tokens, embed_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (global, grid) = self.features(x)?;
        match &self.head {
            Head::Global(proj) => Ok(proj.forward(&global)?.unsqueeze(1)?),
            Head::Grid(_) => {
                let (_, _, h, w) = x.dims4()?;
                let (gh, gw) = match self.source {
                    ConceptSource::Fallback => (h.div_ceil(2).div_ceil(2), w.div_ceil(2).div_ceil(2)),
                    _ => (h / self.spec.patch_size, w / self.spec.patch_size),
                };
                self.tokens_from_grid(&grid, gh, gw)
            }
        }
    }

    pub fn embed(&self, x: &Tensor) -> Result<Vec<ConceptEmbedding>> {
        let tokens = self.forward(x)?.to_dtype(DType::F64)?;
        let (b, n, e) = tokens.dims3()?;
        let flat = tokens.flatten_all()?.to_vec1::<f64>()?;
        (0..b)
            .map(|i| {
                let a = Array2::from_shape_vec((n, e), flat[i * n * e..(i + 1) * n * e].to_vec())
                    .map_err(|err| Error::ShapeMismatch(err.to_string()))?;
                Ok(ConceptEmbedding { tokens: a, variant: self.spec.variant })
            })
            .collect()
    }
}

fn build_grid_decoder(b: &mut Builder<'_>, spec: &ConceptSpec, width: usize, embed_dim: usize) -> Result<GridDecoder> {
    let heads = crate::nn::compatible_groups(spec.heads, embed_dim);
    Ok(GridDecoder {
        queries: b.normal("queries", &[spec.queries, embed_dim], 1.0)?,
        kv: b.pp("kv").linear(width, embed_dim)?,
        attn: CrossAttention::new(&mut b.pp("attn"), embed_dim, embed_dim, embed_dim, heads)?,
        norm1: b.pp("norm1").layer_norm(embed_dim)?,
        mlp: (b.pp("mlp.0").linear(embed_dim, 2 * embed_dim)?, b.pp("mlp.1").linear(2 * embed_dim, embed_dim)?),
        norm2: b.pp("norm2").layer_norm(embed_dim)?,
    })
}

/// Pose-mask encoder plus a copy of the denoiser's encoder half whose
/// per-site outputs pass through zero-initialised 1x1 convolutions.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    spec: DenoiserSpec,
    hint: Vec<Conv2d>,
    hint_out: Conv2d,
    encoder: EncoderHalf,
    zero: Vec<Conv2d>,
}

impl ControlBranch {
    /// `downsample_factor` is the image-to-latent ratio of the codec.
    pub fn new(store: &mut ParamStore, spec: &DenoiserSpec, downsample_factor: usize) -> Result<Self> {
        spec.validate()?;
        if !downsample_factor.is_power_of_two() {
            return Err(Error::Config(format!("downsample factor {downsample_factor} is not a power of two")));
        }
        let mut b = store.builder("control", ParamGroup::ControlBranch);
        // Mask-encoder widths follow the denoiser width: 16 then 32 at the
        // default 64 channels.
        let narrow = (spec.base_channels / 4).max(2);
        let mut hint = vec![b.pp("hint.0").conv3(1, narrow, 1)?];
        let mut prev = narrow;
        for i in 0..downsample_factor.trailing_zeros() as usize {
            hint.push(b.pp(format!("hint.{}", i + 1)).conv3(prev, 2 * narrow, 2)?);
            prev = 2 * narrow;
        }
        let hint_out = b.pp("hint.out").conv3(prev, spec.base_channels, 1)?;
        let encoder = EncoderHalf::new(&mut b, spec)?;
        let mut zero = Vec::new();
        for (i, (c, _, _)) in spec.site_shapes(1, 1).into_iter().enumerate() {
            zero.push(b.pp(format!("zero.{}", spec.site_name(i))).zero_conv(c, c)?);
        }
        Ok(Self { spec: spec.clone(), hint, hint_out, encoder, zero })
    }

    pub fn site_count(&self) -> usize {
        self.zero.len()
    }

    /// `mask: [B, 1, H, W]`, `z_fused: [B, in, h, w]`; returns one residual
    /// per injection site.
    pub fn forward(&self, mask: &Tensor, z_fused: &Tensor, temb: &Tensor, context: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = mask.clone();
        for conv in &self.hint {
            g = conv.forward(&g)?.silu()?;
        }
        let g = self.hint_out.forward(&g)?;
        let h0 = self.encoder.conv_in.forward(z_fused)?;
        if g.dims() != h0.dims() {
            return Err(Error::ShapeMismatch(format!(
                "pose mask encodes to {:?}, latent stem is {:?}",
                g.dims(),
                h0.dims()
            )));
        }
        let mut h = (h0 + g)?;
        let mut out = Vec::with_capacity(self.zero.len());
        for (i, level) in self.encoder.levels.iter().enumerate() {
            h = level.forward(&h, temb, context)?;
            out.push(self.zero[i].forward(&h)?);
            h = level.downsample(&h)?;
        }
        h = self.encoder.mid.forward(&h, temb, context)?;
        out.push(self.zero[self.spec.levels()].forward(&h)?);
        Ok(out)
    }
}

/// Channel concatenation `[z_t ; ego]`.
pub fn fuse_ego_latent(z_t: &LatentTensor, ego: &LatentTensor) -> Result<LatentTensor> {
    let (_, h, w) = z_t.shape();
    let (_, eh, ew) = ego.shape();
    if (h, w) != (eh, ew) {
        return Err(Error::ShapeMismatch(format!("z_t is {h}x{w}, ego latent is {eh}x{ew}")));
    }
    let data = ndarray::concatenate(Axis(0), &[z_t.data().view(), ego.data().view()])
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    LatentTensor::new(data, z_t.scale())
}

/// Batched form of [`fuse_ego_latent`].
pub fn fuse_tensors(z_t: &Tensor, ego: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = z_t.dims4()?;
    let (_, _, eh, ew) = ego.dims4()?;
    if (h, w) != (eh, ew) {
        return Err(Error::ShapeMismatch(format!("z_t is {h}x{w}, ego latent is {eh}x{ew}")));
    }
    Ok(Tensor::cat(&[z_t, ego], 1)?)
}

/// Everything the denoiser is conditioned on for one forward pass.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// `[B, tokens, embed_dim]`.
    pub concept: Tensor,
    /// One map per injection site; `None` when no control branch is attached.
    pub control_residuals: Option<Vec<Tensor>>,
    /// `[B, C, h, w]`.
    pub ego_latent: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use ndarray::Array3;

    fn image_batch(seed: u64, b: usize) -> Tensor {
        let samples = crate::toy::generate(b, 1, 64, seed);
        let refs: Vec<_> = samples.iter().map(|s| &s.egos[0]).collect();
        crate::nn::images_to_tensor(&refs, DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn global_token_shape_and_linearity() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 1);
        let enc = ConceptEncoder::new(&mut store, &ConceptSpec::default(), 32).unwrap();
        let x = image_batch(3, 2);
        let a = enc.forward(&x).unwrap();
        assert_eq!(a.dims(), &[2, 1, 32]);
        assert_eq!(enc.embed(&x).unwrap(), enc.embed(&x).unwrap());

        let w = store.get("concept.head.proj.weight").unwrap().var.as_tensor().clone();
        store.assign("concept.head.proj.weight", &(w * 2.0).unwrap()).unwrap();
        let b = enc.forward(&x).unwrap();
        let a = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(a.iter().zip(&b).all(|(a, b)| *b == 2.0 * a));
    }

    #[test]
    fn grid_decoder_shape() {
        let spec = ConceptSpec { variant: ConceptVariant::GridDecoder, queries: 8, ..ConceptSpec::default() };
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 1);
        let enc = ConceptEncoder::new(&mut store, &spec, 32).unwrap();
        assert_eq!(enc.forward(&image_batch(1, 1)).unwrap().dims(), &[1, 8, 32]);
    }

    #[test]
    fn grid_decoder_ignores_order_without_positions() {
        let spec = ConceptSpec {
            variant: ConceptVariant::GridDecoder,
            zero_positions: true,
            ..ConceptSpec::default()
        };
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 1);
        let enc = ConceptEncoder::new(&mut store, &spec, 32).unwrap();
        let x = image_batch(5, 1).to_dtype(DType::F64).unwrap();
        let (_, grid) = enc.features(&x).unwrap();
        let n = grid.dim(1).unwrap();
        let perm: Vec<u32> = (0..n as u32).rev().map(|i| (i * 7) % n as u32).collect();
        let mut sorted = perm.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), n);
        let shuffled = grid.index_select(&Tensor::new(perm.as_slice(), &Device::Cpu).unwrap(), 1).unwrap();
        let a = enc.tokens_from_grid(&grid, 8, 8).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = enc.tokens_from_grid(&shuffled, 8, 8).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(a.iter().zip(&b).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn gradient_reaches_queries_not_backbone() {
        let spec = ConceptSpec { variant: ConceptVariant::GridDecoder, ..ConceptSpec::default() };
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 1);
        let enc = ConceptEncoder::new(&mut store, &spec, 32).unwrap();
        let loss = enc.forward(&image_batch(2, 1)).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(store.get("concept.head.queries").unwrap().var.as_tensor()).is_some());
        for p in store.params().filter(|p| p.group == ParamGroup::ConceptBackbone) {
            assert!(grads.get(p.var.as_tensor()).is_none(), "{}", p.name);
            assert!(!p.trainable);
        }
    }

    #[test]
    fn missing_backbone_falls_back_or_errors() {
        let spec = ConceptSpec { backbone: ConceptBackbone::External, ..ConceptSpec::default() };
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 1);
        let enc = ConceptEncoder::new(&mut store, &spec, 32).unwrap();
        assert_eq!(enc.source(), ConceptSource::Fallback);
        assert_eq!(enc.forward(&image_batch(1, 1)).unwrap().dims(), &[1, 1, 32]);
        let strict = ConceptSpec { fallback: false, ..spec };
        assert!(matches!(
            ConceptEncoder::new(&mut ParamStore::new(DType::F32, Device::Cpu, 1), &strict, 32),
            Err(Error::VariantUnavailable(_))
        ));
    }

    #[test]
    fn fresh_control_branch_is_silent() {
        let spec = DenoiserSpec { base_channels: 16, embed_dim: 32, ..DenoiserSpec::default() };
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 1);
        let branch = ControlBranch::new(&mut store, &spec, 8).unwrap();
        let den = crate::denoiser::Denoiser::new(&mut store, &spec).unwrap();
        let mask = Tensor::rand(0f32, 1.0, (2, 1, 64, 64), &Device::Cpu).unwrap();
        let z = Tensor::randn(0f32, 1.0, (2, 8, 8, 8), &Device::Cpu).unwrap();
        let ctx = Tensor::randn(0f32, 1.0, (2, 1, 32), &Device::Cpu).unwrap();
        let temb = den.time_embedding(&[10, 900], DType::F32, &Device::Cpu).unwrap();
        let res = branch.forward(&mask, &z, &temb, &ctx).unwrap();
        assert_eq!(res.len(), spec.levels() + 1);
        for r in &res {
            assert!(r.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
        }
        let with = den.forward(&z, &temb, &ctx, Some(&res)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let without = den.forward(&z, &temb, &ctx, None).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn fusion_orders_channels() {
        let z = LatentTensor::new(Array3::from_shape_fn((4, 8, 8), |(c, y, x)| (c * 100 + y * 8 + x) as f64), 1.0).unwrap();
        let ego = LatentTensor::zeros((4, 8, 8));
        let f = fuse_ego_latent(&z, &ego).unwrap();
        assert_eq!(f.shape(), (8, 8, 8));
        assert_eq!(f.data().slice(ndarray::s![0..4, .., ..]), z.data().view());
        assert!(f.data().slice(ndarray::s![4..8, .., ..]).iter().all(|v| *v == 0.0));
        assert!(fuse_ego_latent(&z, &LatentTensor::zeros((4, 4, 4))).is_err());
    }
}
