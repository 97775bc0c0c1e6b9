use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use egofront::datapipe::{DatasetManifest, Split};
use egofront::nn::GroupCensus;
use egofront::objective::{load_checkpoint, read_metrics, RunFiles, StepRecord, Trainer, TrainingSet};
use egofront::{EgoFront, RunConfig};
use serde::Serialize;

use crate::failure::{Failure, Outcome};
use crate::rundir::{write_atomic, DirLock};

/// A resolved configuration and the directory its relative paths are
/// interpreted against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Outcome<Self> {
        if !path.is_file() {
            return Err(Failure::user(format!("config file {} not found", path.display())));
        }
        let config = RunConfig::load(path)?.with_overrides(overrides)?;
        config.validate()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn manifest_path(&self) -> Outcome<PathBuf> {
        let m = self.config.paths.manifest.as_deref().ok_or_else(|| Failure::user("paths.manifest is not set"))?;
        Ok(self.resolve(m))
    }

    /// Loads one split of the configured manifest.
    pub fn load_split(&self, split: Split) -> Outcome<TrainingSet> {
        let manifest_path = self.manifest_path()?;
        let root = match &self.config.paths.data_root {
            Some(r) => self.resolve(r),
            None => manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        load_split(&manifest_path, &root, split, self.config.image_size)
    }
}

pub fn load_split(manifest_path: &Path, root: &Path, split: Split, image_size: usize) -> Outcome<TrainingSet> {
    if !manifest_path.is_file() {
        return Err(Failure::user(format!("manifest {} not found", manifest_path.display())));
    }
    let manifest = DatasetManifest::load(manifest_path)?;
    Ok(TrainingSet::from_manifest(&manifest, root, split, image_size)?)
}

pub fn run_dir(root: &Path, config: &RunConfig) -> PathBuf {
    root.join(format!("run-{}", config.short_digest()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resume<'a> {
    No,
    /// The latest checkpoint in the run directory.
    Latest,
    From(&'a Path),
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub steps: usize,
    pub initial_total: f64,
    pub final_total: f64,
    /// Mean total loss over the last 25 steps (or fewer).
    pub tail_mean_total: f64,
    pub codec_scale: f64,
    pub concept_source: egofront::condition::ConceptSource,
    pub trainable_parameters: usize,
    pub total_parameters: usize,
    pub census: Vec<GroupCensus>,
}

pub struct TrainOutcome {
    pub dir: PathBuf,
    pub trainer: Trainer,
    pub summary: RunSummary,
}

fn truncate_metrics(path: &Path, step: usize) -> Outcome {
    if !path.is_file() {
        return Ok(());
    }
    let keep: Vec<StepRecord> = read_metrics(path)?.into_iter().filter(|r| r.step <= step).collect();
    let mut text = String::new();
    for r in &keep {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Trains the configured model inside `root/run-<digest>`.
pub fn train(loaded: &LoadedConfig, root: &Path, resume: Resume<'_>, quiet: bool) -> Outcome<TrainOutcome> {
    let config = &loaded.config;
    let hash = config.digest();
    let dir = run_dir(root, config);
    let _lock = DirLock::acquire(&dir)?;
    let files = RunFiles::new(&dir);
    let data = loaded.load_split(Split::Train)?;
    if data.is_empty() {
        return Err(Failure::user("the manifest's train split is empty"));
    }

    let mut trainer = match resume {
        Resume::No => {
            if files.latest().exists() {
                return Err(Failure::user(format!(
                    "{} already holds checkpoints; pass --resume to continue it",
                    dir.display()
                )));
            }
            let _ = std::fs::remove_file(files.metrics());
            let mut model = EgoFront::new(config, DType::F32, &Device::Cpu)?;
            if let Some(report) = model.pretrain_codec(&data.all_images())? {
                write_atomic(&dir.join("codec.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
            }
            Trainer::new(model, hash.clone())
        }
        Resume::Latest | Resume::From(_) => {
            let path = match resume {
                Resume::From(p) => p.to_path_buf(),
                _ => files.latest(),
            };
            if !path.is_file() {
                return Err(Failure::user(format!("no checkpoint to resume at {}", path.display())));
            }
            let trainer = Trainer::resume(load_checkpoint(&path, &Device::Cpu)?, &hash)?;
            truncate_metrics(&files.metrics(), trainer.step)?;
            trainer
        }
    };
    let mut text = format!("# config digest {hash}\n");
    text.push_str(&config.to_toml_string()?);
    write_atomic(&dir.join("config.toml"), text.as_bytes())?;

    let until = config.training.steps;
    let every = (until / 20).max(1);
    trainer.run(&data, until, Some(&files), |r| {
        if !quiet && (r.step == 1 || r.step % every == 0 || r.step == until) {
            eprintln!(
                "step {:>5}/{until}  total {:.4}  diff {:.4}  perc {:.4}  |g| {:.3}  {:.2}s",
                r.step, r.total, r.l_diff, r.l_perc, r.grad_norm, r.wall_time
            );
        }
    })?;
    if trainer.step == 0 || !files.latest().exists() {
        trainer.save(&files.latest())?;
    }

    let records = read_metrics(&files.metrics()).unwrap_or_default();
    let tail = &records[records.len().saturating_sub(25)..];
    let model = &trainer.model;
    let summary = RunSummary {
        config_hash: hash,
        steps: trainer.step,
        initial_total: records.first().map(|r| r.total).unwrap_or(f64::NAN),
        final_total: records.last().map(|r| r.total).unwrap_or(f64::NAN),
        tail_mean_total: tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64,
        codec_scale: model.codec_scale(),
        concept_source: model.concept_source(),
        trainable_parameters: model.store.trainable_count(),
        total_parameters: model.store.total_count(),
        census: model.store.census(),
    };
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(TrainOutcome { dir, trainer, summary })
}
