//! Sampling a model over a held-out set and scoring it per body region.

use crate::error::{Error, Result};
use crate::model::EgoFront;
use crate::objective::TrainingSet;
use crate::quality::{self, split_regions, ClothingClassifier, EvalReport, PerceptualMetric};
use crate::schedule::SamplerKind;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub steps: usize,
    pub kind: SamplerKind,
    /// Sample `i` is drawn with seed `seed + i`.
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_model(model: &EgoFront) -> Self {
        let c = model.config();
        Self { steps: c.sampler.steps, kind: c.sampler.kind, seed: c.eval.seed }
    }
}

/// One generated frontal image per item, from its first ego frame.
pub fn generate_set(model: &EgoFront, set: &TrainingSet, opts: &EvalOptions) -> Result<Vec<ImageTensor>> {
    set.items
        .iter()
        .enumerate()
        .map(|(i, it)| model.generate(&it.egos[0], &it.mask, opts.steps, opts.seed.wrapping_add(i as u64), opts.kind))
        .collect()
}

/// Scores predictions against the set's frontal targets, with body regions
/// taken from each item's pose mask.
pub fn score_predictions(
    preds: &[ImageTensor],
    set: &TrainingSet,
    perceptual: &dyn PerceptualMetric,
    hip_fraction: f64,
    psnr_cap: f64,
    config_hash: &str,
) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let truths: Vec<ImageTensor> = set.items.iter().map(|i| i.frontal.clone()).collect();
    let masks = set
        .items
        .iter()
        .map(|i| split_regions(&i.mask, hip_fraction))
        .collect::<Result<Vec<_>>>()?;
    quality::region_eval(preds, &truths, &masks, perceptual, psnr_cap, config_hash)
}

/// Generates and scores the whole set. With a classifier, garment-type
/// accuracy against the set's labels is attached to the report.
pub fn evaluate_model(
    model: &EgoFront,
    set: &TrainingSet,
    opts: &EvalOptions,
    classifier: Option<&dyn ClothingClassifier>,
    config_hash: &str,
) -> Result<(EvalReport, Vec<ImageTensor>)> {
    if set.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let preds = generate_set(model, set, opts)?;
    let c = model.config();
    let mut report = score_predictions(&preds, set, &model.perceptual, c.eval.hip_fraction, c.eval.psnr_cap, config_hash)?;
    if let Some(classifier) = classifier {
        let predicted = preds.iter().map(|p| classifier.classify(p)).collect::<Result<Vec<_>>>()?;
        let truth: Vec<_> = set.items.iter().map(|i| i.labels).collect();
        report.clothing = Some(quality::clothing_accuracy(&predicted, &truth)?);
    }
    Ok((report, preds))
}
