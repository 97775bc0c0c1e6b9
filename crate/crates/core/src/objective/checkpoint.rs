//! Single-file checkpoints: parameters and optimiser moments as safetensors,
//! with everything else in a JSON header entry.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::condition::ConceptSource;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::EgoFront;
use crate::nn::{Adam, ParamGroup};
use crate::schedule::ScheduleParams;

pub const CHECKPOINT_FORMAT: &str = "egofront.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "egofront";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub format_version: u32,
    /// Digest of the configuration the run was started from.
    pub config_hash: String,
    /// Optimisation steps completed.
    pub step: usize,
    pub dtype: String,
    pub schedule: ScheduleParams,
    /// Resolved configuration, including the fitted latent scale.
    pub config: RunConfig,
    pub codec_scale: f64,
    pub concept_source: ConceptSource,
    pub params: Vec<ParamEntry>,
    pub adam: AdamState,
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        DType::F32 => "f32",
        DType::F16 => "f16",
        DType::BF16 => "bf16",
        _ => "other",
    }
}

fn dtype_from_name(name: &str) -> Result<DType> {
    match name {
        "f64" => Ok(DType::F64),
        "f32" => Ok(DType::F32),
        "f16" => Ok(DType::F16),
        "bf16" => Ok(DType::BF16),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

/// Writes model parameters and optimiser state to `path`. The file is
/// written beside the target and renamed, so a crash never leaves a
/// truncated checkpoint under the final name.
pub fn save_checkpoint(path: &Path, model: &EgoFront, adam: &Adam, step: usize, config_hash: &str) -> Result<()> {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        format_version: CHECKPOINT_VERSION,
        config_hash: config_hash.into(),
        step,
        dtype: dtype_name(model.store.dtype()).into(),
        schedule: model.config().schedule,
        config: model.config().clone(),
        codec_scale: model.codec_scale(),
        concept_source: model.concept_source(),
        params: model
            .store
            .params()
            .map(|p| ParamEntry { name: p.name.clone(), group: p.group, trainable: p.trainable })
            .collect(),
        adam: AdamState { lr: adam.lr, beta1: adam.beta1, beta2: adam.beta2, eps: adam.eps, step: adam.step },
    };
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for p in model.store.params() {
        tensors.push((format!("param/{}", p.name), p.var.as_tensor().clone()));
    }
    for (name, (m, v)) in &adam.moments {
        tensors.push((format!("adam_m/{name}"), m.clone()));
        tensors.push((format!("adam_v/{name}"), v.clone()));
    }
    let header: HashMap<String, String> = [(META_KEY.to_string(), serde_json::to_string(&meta)?)].into();
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(header))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.partial"));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_meta(bytes: &[u8], path: &Path) -> Result<CheckpointMeta> {
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no run metadata", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable metadata: {e}", path.display())))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("{}: unknown format `{}`", path.display(), meta.format)));
    }
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} is not supported (expected {CHECKPOINT_VERSION})",
            path.display(),
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Reads only the metadata of a checkpoint.
pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    read_meta(&bytes, path)
}

/// A restored model with its optimiser and metadata.
#[derive(Debug)]
pub struct Restored {
    pub model: EgoFront,
    pub adam: Adam,
    pub meta: CheckpointMeta,
}

/// Rebuilds the model recorded in `path` and loads its parameters and
/// optimiser state.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Restored> {
    let bytes = std::fs::read(path)?;
    let meta = read_meta(&bytes, path)?;
    let dtype = dtype_from_name(&meta.dtype)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;

    let mut model = EgoFront::new(&meta.config, dtype, device)?;
    let recorded: BTreeMap<&str, &ParamEntry> = meta.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let built: Vec<(String, ParamGroup)> = model.store.params().map(|p| (p.name.clone(), p.group)).collect();
    if built.len() != recorded.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, configuration builds {}",
            recorded.len(),
            built.len()
        )));
    }
    for (name, group) in &built {
        let entry = recorded
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")))?;
        if entry.group != *group {
            return Err(Error::Checkpoint(format!("parameter `{name}` changed group")));
        }
        let t = tensors
            .get(&format!("param/{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor for `{name}`")))?;
        model.store.assign(name, t)?;
    }
    let frozen: Vec<String> = meta.params.iter().filter(|p| !p.trainable).map(|p| p.name.clone()).collect();
    model.store.freeze_where(|n| frozen.iter().any(|f| f == n));
    model.rebuild()?;

    let mut adam = Adam::new(meta.adam.lr);
    adam.beta1 = meta.adam.beta1;
    adam.beta2 = meta.adam.beta2;
    adam.eps = meta.adam.eps;
    adam.step = meta.adam.step;
    for (key, m) in &tensors {
        if let Some(name) = key.strip_prefix("adam_m/") {
            let v = tensors
                .get(&format!("adam_v/{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for `{name}`")))?;
            adam.moments.insert(name.to_string(), (m.clone(), v.clone()));
        }
    }
    Ok(Restored { model, adam, meta })
}
