use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Restored};
use super::data::TrainingSet;
use super::loss::{compound_loss, Batch, BatchItem};
use crate::datapipe::{augment_ego, augment_frontal};
use crate::error::{Error, Result};
use crate::model::EgoFront;
use crate::nn::Adam;
use crate::tensor::{ImageTensor, PoseMask};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: usize,
    pub l_diff: f64,
    pub l_perc: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Seconds spent on this step.
    pub wall_time: f64,
}

/// Where a training run writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("step-{step:06}.safetensors"))
    }

    /// The most recent checkpoint, rewritten after every save.
    pub fn latest(&self) -> PathBuf {
        self.dir.join("checkpoints").join("latest.safetensors")
    }
}

/// The augmented inputs drawn for one step.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub ids: Vec<String>,
    pub ego: Vec<ImageTensor>,
    pub frontal: Vec<ImageTensor>,
    pub mask: Vec<PoseMask>,
    pub loss_seed: u64,
}

/// Draws the batch for `step` from a stream that depends only on the seed
/// and the step index, so a resumed run sees the same data.
pub fn draw_step(data: &TrainingSet, model: &EgoFront, step: usize) -> Result<StepSample> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    rng.set_stream(step as u64);
    let mut out = StepSample { ids: vec![], ego: vec![], frontal: vec![], mask: vec![], loss_seed: 0 };
    for _ in 0..cfg.training.batch_size {
        let item = &data.items[rng.random_range(0..data.len())];
        let ego = &item.egos[rng.random_range(0..item.egos.len())];
        let front = augment_frontal(&item.frontal, &item.mask, cfg.augment.q, &cfg.augment.ranges, rng.next_u64())?;
        let ego = augment_ego(ego, cfg.augment.p, &cfg.augment.ranges, rng.next_u64());
        out.ids.push(item.id.clone());
        out.frontal.push(front.image);
        out.mask.push(front.mask);
        out.ego.push(ego.image);
    }
    out.loss_seed = rng.next_u64();
    Ok(out)
}

#[derive(Debug)]
pub struct Trainer {
    pub model: EgoFront,
    pub adam: Adam,
    /// Steps completed so far.
    pub step: usize,
    pub config_hash: String,
}

impl Trainer {
    pub fn new(model: EgoFront, config_hash: impl Into<String>) -> Self {
        let adam = Adam::new(model.config().training.learning_rate);
        Self { model, adam, step: 0, config_hash: config_hash.into() }
    }

    /// Continues from a checkpoint written by a run with `config_hash`.
    pub fn resume(restored: Restored, config_hash: &str) -> Result<Self> {
        if restored.meta.config_hash != config_hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written for configuration {}, this run is {config_hash}",
                restored.meta.config_hash
            )));
        }
        Ok(Self { model: restored.model, adam: restored.adam, step: restored.meta.step, config_hash: config_hash.into() })
    }

    /// Runs one optimisation step. A non-finite loss or gradient aborts
    /// before any parameter changes.
    pub fn step_once(&mut self, data: &TrainingSet) -> Result<StepRecord> {
        let started = Instant::now();
        let index = self.step + 1;
        let sample = draw_step(data, &self.model, index)?;
        let items: Vec<BatchItem<'_>> = (0..sample.ids.len())
            .map(|i| BatchItem { id: &sample.ids[i], ego: &sample.ego[i], frontal: &sample.frontal[i], mask: &sample.mask[i] })
            .collect();
        let cfg = self.model.config();
        let batch = Batch::new(&items, cfg.image_size, self.model.store.dtype(), self.model.store.device())?;
        let weights = cfg.loss;
        let clip = (cfg.training.grad_clip > 0.0).then_some(cfg.training.grad_clip);

        let out = compound_loss(&self.model, &batch, &weights, sample.loss_seed)?;
        if !out.components.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: index });
        }
        let grads = out.total.backward()?;
        let grad_norm = self.adam.step(&self.model.store, &grads, clip).map_err(|e| match e {
            Error::InvalidInput(_) => Error::NonFiniteLoss { step: index },
            other => other,
        })?;
        self.step = index;
        Ok(StepRecord {
            step: index,
            l_diff: out.components.diff,
            l_perc: out.components.perc,
            total: out.components.total,
            grad_norm,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_checkpoint(path, &self.model, &self.adam, self.step, &self.config_hash)
    }

    /// Trains until `until` steps are complete, appending to the metrics
    /// log and checkpointing every `checkpoint_every` steps and at the end.
    /// `on_step` sees each record as it is produced.
    pub fn run(
        &mut self,
        data: &TrainingSet,
        until: usize,
        files: Option<&RunFiles>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>> {
        let every = self.model.config().training.checkpoint_every;
        let mut log = match files {
            Some(f) => {
                std::fs::create_dir_all(&f.dir)?;
                Some(std::fs::OpenOptions::new().create(true).append(true).open(f.metrics())?)
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step < until {
            let rec = self.step_once(data)?;
            if let Some(log) = log.as_mut() {
                writeln!(log, "{}", serde_json::to_string(&rec)?)?;
                log.flush()?;
            }
            on_step(&rec);
            records.push(rec);
            if let Some(f) = files {
                if (every > 0 && self.step % every == 0) || self.step == until {
                    self.save(&f.checkpoint(self.step))?;
                    self.save(&f.latest())?;
                }
            }
        }
        Ok(records)
    }
}

/// Reads a metrics log written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
