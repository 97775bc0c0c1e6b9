//! Noise-prediction U-Net with timestep embedding, cross-attention on
//! concept tokens and additive control residuals.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, Linear};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Builder, CrossAttention, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSpec {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Level indices (0 = finest) that carry cross-attention.
    pub attention_levels: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Cross-attention context width.
    pub embed_dim: usize,
    pub heads: usize,
    pub norm_groups: usize,
    /// Probability of replacing the concept tokens with zeros during
    /// training.
    pub concept_dropout: f64,
    /// Train only the attention blocks (and everything outside the
    /// denoiser); the rest of the denoiser is frozen.
    pub train_attention_only: bool,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            in_channels: 8,
            out_channels: 4,
            embed_dim: 128,
            heads: 4,
            norm_groups: 8,
            concept_dropout: 0.0,
            train_attention_only: false,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        if levels == 0 || self.channel_multipliers.contains(&0) || self.base_channels == 0 {
            return Err(Error::Config("denoiser needs at least one level with positive width".into()));
        }
        if let Some(l) = self.attention_levels.iter().find(|l| **l >= levels) {
            return Err(Error::Config(format!("attention level {l} but only {levels} levels")));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::Config("denoiser channel counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.concept_dropout) {
            return Err(Error::Config(format!("concept_dropout {} outside [0, 1]", self.concept_dropout)));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Activation shape `(C, H, W)` at every injection site, down levels
    /// first, then the mid block.
    pub fn site_shapes(&self, latent_h: usize, latent_w: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let (mut h, mut w) = (latent_h, latent_w);
        for level in 0..self.levels() {
            out.push((self.level_channels(level), h, w));
            if level + 1 < self.levels() {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
        out.push((self.level_channels(self.levels() - 1), h, w));
        out
    }

    pub fn site_name(&self, index: usize) -> String {
        if index < self.levels() {
            format!("down{index}")
        } else {
            "mid".into()
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub(crate) fn new(b: &mut Builder<'_>, cin: usize, cout: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: b.pp("norm1").group_norm(groups, cin)?,
            conv1: b.pp("conv1").conv3(cin, cout, 1)?,
            time: b.pp("time").linear(time_dim, cout)?,
            norm2: b.pp("norm2").group_norm(groups, cout)?,
            conv2: b.pp("conv2").conv3(cout, cout, 1)?,
            skip: if cin != cout { Some(b.pp("skip").conv2d(cin, cout, 1, 1, 0)?) } else { None },
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnBlock {
    norm: GroupNorm,
    attn: CrossAttention,
}

impl AttnBlock {
    pub(crate) fn new(b: &mut Builder<'_>, channels: usize, context_dim: usize, heads: usize, groups: usize) -> Result<Self> {
        let heads = nn::compatible_groups(heads, channels);
        Ok(Self {
            norm: b.pp("norm").group_norm(groups, channels)?,
            attn: CrossAttention::new(&mut b.pp("attn"), channels, context_dim, channels, heads)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let y = self.attn.forward(&tokens, context)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((x + y)?)
    }
}

/// One encoder level: residual block plus optional cross-attention.
#[derive(Debug, Clone)]
pub(crate) struct DownLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    downsample: Option<Conv2d>,
}

impl DownLevel {
    pub(crate) fn forward(&self, h: &Tensor, temb: &Tensor, context: &Tensor) -> Result<Tensor> {
        let h = self.res.forward(h, temb)?;
        match &self.attn {
            Some(a) => a.forward(&h, context),
            None => Ok(h),
        }
    }

    pub(crate) fn downsample(&self, h: &Tensor) -> Result<Tensor> {
        match &self.downsample {
            Some(d) => Ok(d.forward(h)?),
            None => Ok(h.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MidBlock {
    res1: ResBlock,
    attn: AttnBlock,
    res2: ResBlock,
}

impl MidBlock {
    pub(crate) fn forward(&self, h: &Tensor, temb: &Tensor, context: &Tensor) -> Result<Tensor> {
        let h = self.res1.forward(h, temb)?;
        let h = self.attn.forward(&h, context)?;
        self.res2.forward(&h, temb)
    }
}

/// Encoder half shared by the denoiser and the control branch.
#[derive(Debug, Clone)]
pub(crate) struct EncoderHalf {
    pub(crate) conv_in: Conv2d,
    pub(crate) levels: Vec<DownLevel>,
    pub(crate) mid: MidBlock,
}

impl EncoderHalf {
    pub(crate) fn new(b: &mut Builder<'_>, spec: &DenoiserSpec) -> Result<Self> {
        let g = spec.norm_groups;
        let td = spec.time_dim();
        let conv_in = b.pp("conv_in").conv3(spec.in_channels, spec.base_channels, 1)?;
        let mut levels = Vec::new();
        let mut prev = spec.base_channels;
        for level in 0..spec.levels() {
            let ch = spec.level_channels(level);
            let mut lb = b.pp(format!("down{level}"));
            let res = ResBlock::new(&mut lb.pp("res"), prev, ch, td, g)?;
            let attn = if spec.attention_levels.contains(&level) {
                Some(AttnBlock::new(&mut lb.pp("attn"), ch, spec.embed_dim, spec.heads, g)?)
            } else {
                None
            };
            let downsample = if level + 1 < spec.levels() { Some(lb.pp("downsample").conv3(ch, ch, 2)?) } else { None };
            levels.push(DownLevel { res, attn, downsample });
            prev = ch;
        }
        let mut mb = b.pp("mid");
        let mid = MidBlock {
            res1: ResBlock::new(&mut mb.pp("res1"), prev, prev, td, g)?,
            attn: AttnBlock::new(&mut mb.pp("attn"), prev, spec.embed_dim, spec.heads, g)?,
            res2: ResBlock::new(&mut mb.pp("res2"), prev, prev, td, g)?,
        };
        Ok(Self { conv_in, levels, mid })
    }
}

#[derive(Debug, Clone)]
struct UpLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    upsample: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    spec: DenoiserSpec,
    time1: Linear,
    time2: Linear,
    encoder: EncoderHalf,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, spec: &DenoiserSpec) -> Result<Self> {
        spec.validate()?;
        let mut b = store.builder("denoiser", ParamGroup::Denoiser);
        let g = spec.norm_groups;
        let td = spec.time_dim();
        let time1 = b.pp("time.0").linear(spec.base_channels, td)?;
        let time2 = b.pp("time.1").linear(td, td)?;
        let encoder = EncoderHalf::new(&mut b, spec)?;
        let mut up = Vec::new();
        let mut prev = spec.level_channels(spec.levels() - 1);
        for level in (0..spec.levels()).rev() {
            let ch = spec.level_channels(level);
            let mut lb = b.pp(format!("up{level}"));
            let res = ResBlock::new(&mut lb.pp("res"), prev + ch, ch, td, g)?;
            let attn = if spec.attention_levels.contains(&level) {
                Some(AttnBlock::new(&mut lb.pp("attn"), ch, spec.embed_dim, spec.heads, g)?)
            } else {
                None
            };
            let upsample = if level > 0 { Some(lb.pp("upsample").conv3(ch, ch, 1)?) } else { None };
            up.push(UpLevel { res, attn, upsample });
            prev = ch;
        }
        let norm_out = b.pp("norm_out").group_norm(g, spec.base_channels)?;
        let conv_out = b.pp("conv_out").conv3(spec.base_channels, spec.out_channels, 1)?;
        if spec.train_attention_only {
            store.freeze_where(|name| name.starts_with("denoiser.") && !name.contains(".attn."));
        }
        let mut built = Self { spec: spec.clone(), time1, time2, encoder, up, norm_out, conv_out };
        if spec.train_attention_only {
            // Rebuild so the newly frozen parameters come back detached.
            built = Self::new(store, &DenoiserSpec { train_attention_only: false, ..spec.clone() })?;
            built.spec.train_attention_only = true;
        }
        Ok(built)
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    /// Learned projection of sinusoidal features, one row per sample.
    pub fn time_embedding(&self, t: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let dim = self.spec.base_channels;
        let flat: Vec<f64> = t.iter().flat_map(|&t| crate::schedule::timestep_embedding(t, dim)).collect();
        let feats = Tensor::from_vec(flat, (t.len(), dim), device)?.to_dtype(dtype)?;
        Ok(self.time2.forward(&self.time1.forward(&feats)?.silu()?)?)
    }

    /// `z_fused: [B, in, h, w]`, `context: [B, tokens, embed_dim]`.
    /// `residuals`, when present, holds one map per injection site.
    pub fn forward(&self, z_fused: &Tensor, temb: &Tensor, context: &Tensor, residuals: Option<&[Tensor]>) -> Result<Tensor> {
        let (b, c, lh, lw) = z_fused.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "denoiser input has {c} channels, expected {}",
                self.spec.in_channels
            )));
        }
        let (cb, _, ce) = context.dims3()?;
        if cb != b || ce != self.spec.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "concept tokens {:?} do not match batch {b} and width {}",
                context.dims(),
                self.spec.embed_dim
            )));
        }
        if let Some(r) = residuals {
            check_residuals(&self.spec, r, b, lh, lw)?;
        }
        let add_site = |h: Tensor, i: usize| -> Result<Tensor> {
            match residuals {
                Some(r) => Ok((h + &r[i])?),
                None => Ok(h),
            }
        };

        let mut h = self.encoder.conv_in.forward(z_fused)?;
        let mut skips = Vec::with_capacity(self.spec.levels());
        for (i, level) in self.encoder.levels.iter().enumerate() {
            h = add_site(level.forward(&h, temb, context)?, i)?;
            skips.push(h.clone());
            h = level.downsample(&h)?;
        }
        h = add_site(self.encoder.mid.forward(&h, temb, context)?, self.spec.levels())?;
        for up in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = up.res.forward(&Tensor::cat(&[&h, &skip], 1)?, temb)?;
            if let Some(a) = &up.attn {
                h = a.forward(&h, context)?;
            }
            if let Some(conv) = &up.upsample {
                h = conv.forward(&nn::upsample2x(&h)?)?;
            }
        }
        Ok(self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?)
    }
}

pub(crate) fn check_residuals(spec: &DenoiserSpec, residuals: &[Tensor], batch: usize, lh: usize, lw: usize) -> Result<()> {
    let shapes = spec.site_shapes(lh, lw);
    if residuals.len() != shapes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} control residuals for {} injection sites",
            residuals.len(),
            shapes.len()
        )));
    }
    for (i, (r, (c, h, w))) in residuals.iter().zip(shapes).enumerate() {
        if r.dims() != [batch, c, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "control residual at site {} is {:?}, activation is {:?}",
                spec.site_name(i),
                r.dims(),
                [batch, c, h, w]
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenoiserSpec {
        DenoiserSpec { base_channels: 16, embed_dim: 32, ..DenoiserSpec::default() }
    }

    fn inputs(spec: &DenoiserSpec) -> (Tensor, Tensor) {
        let dev = Device::Cpu;
        let z = Tensor::randn(0f32, 1.0, (2, spec.in_channels, 8, 8), &dev).unwrap();
        let ctx = Tensor::randn(0f32, 1.0, (2, 1, spec.embed_dim), &dev).unwrap();
        (z, ctx)
    }

    #[test]
    fn output_shape_and_determinism() {
        let spec = small();
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let net = Denoiser::new(&mut store, &spec).unwrap();
        let (z, ctx) = inputs(&spec);
        let temb = net.time_embedding(&[1, 500], DType::F32, &Device::Cpu).unwrap();
        let a = net.forward(&z, &temb, &ctx, None).unwrap();
        let b = net.forward(&z, &temb, &ctx, None).unwrap();
        assert_eq!(a.dims(), &[2, 4, 8, 8]);
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn zero_input_stays_finite() {
        let spec = small();
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let net = Denoiser::new(&mut store, &spec).unwrap();
        let z = Tensor::zeros((1, 8, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let ctx = Tensor::zeros((1, 1, spec.embed_dim), DType::F32, &Device::Cpu).unwrap();
        let temb = net.time_embedding(&[1000], DType::F32, &Device::Cpu).unwrap();
        let y = net.forward(&z, &temb, &ctx, None).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn residual_shape_violation_names_site() {
        let spec = small();
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 0);
        let net = Denoiser::new(&mut store, &spec).unwrap();
        let (z, ctx) = inputs(&spec);
        let temb = net.time_embedding(&[3, 3], DType::F32, &Device::Cpu).unwrap();
        let mut res: Vec<Tensor> = spec
            .site_shapes(8, 8)
            .into_iter()
            .map(|(c, h, w)| Tensor::zeros((2, c, h, w), DType::F32, &Device::Cpu).unwrap())
            .collect();
        assert!(net.forward(&z, &temb, &ctx, Some(&res)).is_ok());
        res[1] = Tensor::zeros((2, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let err = net.forward(&z, &temb, &ctx, Some(&res)).unwrap_err().to_string();
        assert!(err.contains("down1"), "{err}");
    }

    #[test]
    fn site_shapes_follow_levels() {
        let spec = DenoiserSpec::default();
        assert_eq!(spec.site_shapes(8, 8), vec![(64, 8, 8), (128, 4, 4), (256, 2, 2), (256, 2, 2)]);
        assert!(DenoiserSpec { attention_levels: vec![3], ..spec }.validate().is_err());
    }

    #[test]
    fn attention_only_freeze_mask() {
        let spec = DenoiserSpec { train_attention_only: true, ..small() };
        let mut store = ParamStore::new(DType::F32, Device::Cpu, 0);
        Denoiser::new(&mut store, &spec).unwrap();
        for p in store.params() {
            assert_eq!(p.trainable, p.name.contains(".attn."), "{}", p.name);
        }
    }
}
