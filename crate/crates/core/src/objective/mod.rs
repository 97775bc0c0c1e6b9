//! Training objective, perceptual distance, training loop and checkpoints.

mod checkpoint;
mod data;
mod loss;
mod perceptual;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_meta, save_checkpoint, AdamState, CheckpointMeta, ParamEntry, Restored,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use data::{TrainingItem, TrainingSet};
pub use loss::{compound_loss, Batch, BatchItem, DiffusionModel, LossComponents, LossDraws, LossOutput, LossWeights};
pub use perceptual::{PerceptualNet, PerceptualSpec};
pub use train::{draw_step, read_metrics, RunFiles, StepRecord, StepSample, Trainer};
