use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use egofront::datapipe::Split;
use egofront::evaluate::{evaluate_model, score_predictions, EvalOptions};
use egofront::model::EgoFront;
use egofront::objective::{load_checkpoint, PerceptualNet, PerceptualSpec, TrainingSet};
use egofront::quality::{ClothingClassifier, EvalReport, DEFAULT_HIP_FRACTION, PSNR_CAP_DB};
use egofront::schedule::SamplerKind;
use egofront::toy::ToyClothingClassifier;
use egofront::ImageTensor;

use crate::failure::{Failure, Outcome};
use crate::rundir::{write_atomic, DirLock};
use crate::train::load_split;

/// What produces the predictions being scored.
pub enum Predictor<'a> {
    Checkpoint(&'a Path),
    /// Returns the ground truth; checks the scoring pipeline end to end.
    Oracle,
}

pub struct EvalArgs<'a> {
    pub predictor: Predictor<'a>,
    pub manifest: &'a Path,
    pub data_root: Option<&'a Path>,
    pub split: Split,
    pub out: &'a Path,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub sampler: Option<SamplerKind>,
    pub toy_classifier: bool,
    pub save_samples: bool,
}

pub fn write_report(report: &EvalReport, out: &Path) -> Outcome<[PathBuf; 2]> {
    let json = out.join("report.json");
    let table = out.join("report.md");
    write_atomic(&json, report.to_json()?.as_bytes())?;
    write_atomic(&table, report.to_table().as_bytes())?;
    Ok([json, table])
}

/// Samples the model once per set item and scores it.
pub fn evaluate_trained(
    model: &EgoFront,
    set: &TrainingSet,
    opts: &EvalOptions,
    toy_classifier: bool,
    config_hash: &str,
) -> Outcome<(EvalReport, Vec<ImageTensor>)> {
    let classifier = ToyClothingClassifier;
    let classifier: Option<&dyn ClothingClassifier> = toy_classifier.then_some(&classifier as _);
    Ok(evaluate_model(model, set, opts, classifier, config_hash)?)
}

pub fn run(args: &EvalArgs<'_>) -> Outcome<EvalReport> {
    let root = match args.data_root {
        Some(r) => r.to_path_buf(),
        None => args.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let _lock = DirLock::acquire(args.out)?;
    let (report, preds, set) = match args.predictor {
        Predictor::Checkpoint(path) => {
            if !path.is_file() {
                return Err(Failure::user(format!("checkpoint {} not found", path.display())));
            }
            let restored = load_checkpoint(path, &Device::Cpu)?;
            let model = &restored.model;
            let set = load_split(args.manifest, &root, args.split, model.config().image_size)?;
            if set.is_empty() {
                return Err(Failure::user(format!("the {:?} split is empty", args.split)));
            }
            let mut opts = EvalOptions::from_model(model);
            opts.steps = args.steps.unwrap_or(opts.steps);
            opts.seed = args.seed.unwrap_or(opts.seed);
            opts.kind = args.sampler.unwrap_or(opts.kind);
            let (report, preds) =
                evaluate_trained(model, &set, &opts, args.toy_classifier, &restored.meta.config_hash)?;
            (report, preds, set)
        }
        Predictor::Oracle => {
            let manifest = egofront::datapipe::DatasetManifest::load(args.manifest)?;
            let first = manifest
                .split_entries(args.split)
                .first()
                .map(|e| root.join(&e.frontal_path))
                .ok_or_else(|| Failure::user(format!("the {:?} split is empty", args.split)))?;
            let size = ImageTensor::load(&first)?.resolution().0;
            let set = load_split(args.manifest, &root, args.split, size)?;
            let preds: Vec<ImageTensor> = set.items.iter().map(|i| i.frontal.clone()).collect();
            let net = PerceptualNet::new(&PerceptualSpec::default(), DType::F32, &Device::Cpu)?;
            let mut report = score_predictions(&preds, &set, &net, DEFAULT_HIP_FRACTION, PSNR_CAP_DB, "oracle")?;
            if args.toy_classifier {
                let predicted = preds.iter().map(|p| ToyClothingClassifier.classify(p)).collect::<Result<Vec<_>, _>>()?;
                let truth: Vec<_> = set.items.iter().map(|i| i.labels).collect();
                report.clothing = Some(egofront::quality::clothing_accuracy(&predicted, &truth)?);
            }
            (report, preds, set)
        }
    };
    write_report(&report, args.out)?;
    if args.save_samples {
        let dir = args.out.join("samples");
        std::fs::create_dir_all(&dir)?;
        for (item, pred) in set.items.iter().zip(&preds) {
            let grid = ImageTensor::side_by_side(&[&item.egos[0], &item.mask.to_image(), pred, &item.frontal])?;
            grid.save(dir.join(format!("{}.png", item.id)))?;
        }
    }
    Ok(report)
}
