//! Run configuration: one TOML file, every key defaulted, with dotted-key
//! overrides and a digest of the resolved result.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{AutoencoderTraining, CodecSpec};
use crate::condition::ConceptSpec;
use crate::datapipe::AugmentRanges;
use crate::denoiser::DenoiserSpec;
use crate::error::{Error, Result};
use crate::objective::{LossWeights, PerceptualSpec};
use crate::quality::DEFAULT_HIP_FRACTION;
use crate::schedule::{SamplerKind, ScheduleParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSpec {
    pub enabled: bool,
}

impl Default for ControlSpec {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of the joint frontal image/mask perturbation.
    pub q: f64,
    /// Probability of the independent ego rotation.
    pub p: f64,
    pub ranges: AugmentRanges,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { q: 0.5, p: 0.5, ranges: AugmentRanges::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables periodic ones).
    pub checkpoint_every: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 4, learning_rate: 2e-4, seed: 0, checkpoint_every: 100, grad_clip: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub kind: SamplerKind,
    /// Classifier-free guidance scale; 1 disables guidance.
    pub guidance_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, kind: SamplerKind::Ancestral, guidance_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub hip_fraction: f64,
    pub psnr_cap: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { hip_fraction: DEFAULT_HIP_FRACTION, psnr_cap: crate::quality::PSNR_CAP_DB, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    /// Directory the manifest's relative paths resolve against; defaults
    /// to the manifest's own directory.
    pub data_root: Option<PathBuf>,
    /// Parent of the per-run directories. Not part of the digest.
    pub output_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Square frontal/ego image side in pixels.
    pub image_size: usize,
    pub schedule: ScheduleParams,
    pub codec: CodecSpec,
    pub codec_training: AutoencoderTraining,
    pub denoiser: DenoiserSpec,
    pub concept: ConceptSpec,
    pub control: ControlSpec,
    pub perceptual: PerceptualSpec,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            schedule: ScheduleParams::default(),
            codec: CodecSpec::default(),
            codec_training: AutoencoderTraining::default(),
            denoiser: DenoiserSpec::default(),
            concept: ConceptSpec::default(),
            control: ControlSpec::default(),
            perceptual: PerceptualSpec::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            training: TrainingConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// A configuration small enough to train on the procedural toy data
    /// on one CPU core in minutes.
    pub fn toy() -> Self {
        let d = Self::default();
        Self {
            image_size: 32,
            codec: CodecSpec { downsample_factor: 4, widths: vec![16, 32], ..d.codec },
            codec_training: AutoencoderTraining { steps: 300, batch_size: 8, ..d.codec_training },
            denoiser: DenoiserSpec {
                base_channels: 32,
                channel_multipliers: vec![1, 2],
                attention_levels: vec![0, 1],
                embed_dim: 64,
                ..d.denoiser
            },
            concept: ConceptSpec { backbone_width: 32, ..d.concept },
            perceptual: PerceptualSpec { widths: vec![8, 16, 32], ..d.perceptual },
            training: TrainingConfig { batch_size: 8, learning_rate: 1e-3, ..d.training },
            sampler: SamplerConfig { steps: 25, kind: SamplerKind::Strided, ..d.sampler },
            ..d
        }
    }

    /// Parses TOML, reporting every key that has no counterpart in the
    /// schema before attempting deserialisation.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(value)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let unknown = unknown_keys(&table);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `section.key=value` overrides; values parse as TOML, falling
    /// back to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = self.to_table()?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut node = &mut table;
            for part in &parts[..parts.len() - 1] {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not a section")))?;
            }
            node.insert(parts[parts.len() - 1].to_string(), value);
        }
        Self::from_table(table)
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        match toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))? {
            toml::Value::Table(t) => Ok(t),
            _ => Err(Error::Config("config did not serialise to a table".into())),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.codec.validate()?;
        self.denoiser.validate()?;
        self.codec.latent_shape(self.image_size, self.image_size)?;
        let (c, h, _) = self.codec.latent_shape(self.image_size, self.image_size)?;
        if self.denoiser.out_channels != c || self.denoiser.in_channels != 2 * c {
            return Err(Error::Config(format!(
                "denoiser in/out channels must be {}/{} for {c} latent channels",
                2 * c,
                c
            )));
        }
        let levels = self.denoiser.levels();
        if h % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!("latent side {h} not divisible across {levels} levels")));
        }
        if self.image_size % self.concept.patch_size != 0 {
            return Err(Error::Config("image_size must be divisible by concept.patch_size".into()));
        }
        self.loss.validate()?;
        for (name, v) in [("augment.p", self.augment.p), ("augment.q", self.augment.q)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.training.batch_size == 0 || !(self.training.learning_rate > 0.0) {
            return Err(Error::Config("training needs batch_size >= 1 and a positive learning rate".into()));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.steps {
            return Err(Error::Config(format!("sampler.steps must lie in 1..={}", self.schedule.steps)));
        }
        if !(0.0..=1.0).contains(&self.eval.hip_fraction) {
            return Err(Error::Config("eval.hip_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything except the output root.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths.output_root = None;
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn short_digest(&self) -> String {
        self.digest()[..12].to_string()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Dotted paths present in `table` but absent from the default config.
pub fn unknown_keys(table: &toml::Table) -> Vec<String> {
    let reference = RunConfig::default().to_table().expect("defaults serialise");
    let mut out = Vec::new();
    walk_unknown(table, &reference, "", &mut out);
    out
}

/// Sections whose keys are optional paths, absent from the serialised
/// defaults but still valid.
const OPTIONAL_KEYS: &[&str] = &[
    "codec.weights",
    "codec.extractor_weights",
    "concept.backbone_weights",
    "paths.manifest",
    "paths.data_root",
    "paths.output_root",
];

fn walk_unknown(table: &toml::Table, reference: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match reference.get(k) {
            Some(toml::Value::Table(sub)) => {
                if let toml::Value::Table(t) = v {
                    walk_unknown(t, sub, &path, out);
                }
            }
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(path),
        }
    }
}
