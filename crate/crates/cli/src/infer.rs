use std::path::{Path, PathBuf};

use candle_core::Device;
use egofront::objective::load_checkpoint;
use egofront::schedule::SamplerKind;
use egofront::{ImageTensor, PoseMask};
use serde::Serialize;

use crate::failure::{Failure, Outcome};

pub struct InferArgs<'a> {
    pub checkpoint: &'a Path,
    pub ego: &'a Path,
    pub mask: &'a Path,
    pub out: &'a Path,
    pub steps: Option<usize>,
    pub seed: u64,
    pub sampler: Option<SamplerKind>,
}

#[derive(Serialize)]
struct InferRecord<'a> {
    config_hash: &'a str,
    checkpoint_step: usize,
    steps: usize,
    seed: u64,
    sampler: SamplerKind,
    ego: String,
    pose_mask: String,
}

fn sibling(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

/// Output paths for one inference: image, side-by-side grid, metadata.
pub fn outputs(out: &Path) -> [PathBuf; 3] {
    [out.to_path_buf(), sibling(out, "_grid", "png"), sibling(out, "", "json")]
}

pub fn run(args: &InferArgs<'_>) -> Outcome<[PathBuf; 3]> {
    for (what, p) in [("checkpoint", args.checkpoint), ("ego image", args.ego), ("pose mask", args.mask)] {
        if !p.is_file() {
            return Err(Failure::user(format!("{what} {} not found", p.display())));
        }
    }
    let restored = load_checkpoint(args.checkpoint, &Device::Cpu)?;
    let model = &restored.model;
    let ego = ImageTensor::load(args.ego)?;
    let mask = PoseMask::load(args.mask)?;
    let size = model.config().image_size;
    for (what, res) in [("ego image", ego.resolution()), ("pose mask", mask.resolution())] {
        if res != (size, size) {
            return Err(Failure::user(format!(
                "{what} is {}x{}, the checkpoint's codec expects {size}x{size}",
                res.1, res.0
            )));
        }
    }
    let steps = args.steps.unwrap_or(model.config().sampler.steps);
    let kind = args.sampler.unwrap_or(model.config().sampler.kind);
    let image = model.generate(&ego, &mask, steps, args.seed, kind)?;

    let paths = outputs(args.out);
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    image.save(&paths[0])?;
    ImageTensor::side_by_side(&[&ego, &mask.to_image(), &image])?.save(&paths[1])?;
    let record = InferRecord {
        config_hash: &restored.meta.config_hash,
        checkpoint_step: restored.meta.step,
        steps,
        seed: args.seed,
        sampler: kind,
        ego: args.ego.display().to_string(),
        pose_mask: args.mask.display().to_string(),
    };
    std::fs::write(&paths[2], serde_json::to_string_pretty(&record)?)?;
    Ok(paths)
}
