use std::path::{Path, PathBuf};

use egofront::datapipe::{
    pair_samples, read_frame_index, EgoFrame, FrontalFrame, PairingParams, DEFAULT_MAX_EGO_FRAMES, FRAME_INDEX,
};

use crate::failure::{Failure, Outcome};
use crate::rundir::write_atomic;

pub struct PrepArgs<'a> {
    pub ego_dir: &'a Path,
    pub frontal_dir: &'a Path,
    pub out: &'a Path,
    pub window: f64,
    pub per_frontal: usize,
    pub val_fraction: f64,
}

/// `dir` as seen from `base`: relative when `dir` lies below it, absolute
/// otherwise.
fn relative_to(dir: &Path, base: &Path) -> Outcome<PathBuf> {
    let dir = dir.canonicalize()?;
    let base = base.canonicalize()?;
    Ok(dir.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(dir))
}

fn join(prefix: &Path, leaf: &str) -> String {
    let p = prefix.join(leaf);
    p.to_string_lossy().replace('\\', "/")
}

fn read_index<T: serde::de::DeserializeOwned>(
    dir: &Path,
    what: &str,
) -> Outcome<(Vec<T>, Vec<egofront::datapipe::RejectedRecord>)> {
    let index = dir.join(FRAME_INDEX);
    if !index.is_file() {
        return Err(Failure::user(format!("{what} directory {} has no {FRAME_INDEX}", dir.display())));
    }
    Ok(read_frame_index(&index)?)
}

/// Pairs the two capture streams and writes a validated manifest plus a
/// drop report beside it. Returns the report text on partial success.
pub fn run(args: &PrepArgs<'_>) -> Outcome<Option<String>> {
    let (mut egos, ego_rejects) = read_index::<EgoFrame>(args.ego_dir, "ego")?;
    let (mut fronts, front_rejects) = read_index::<FrontalFrame>(args.frontal_dir, "frontal")?;
    if fronts.is_empty() {
        return Err(Failure::user(format!("no frontal frames listed in {}", args.frontal_dir.display())));
    }
    if egos.is_empty() {
        return Err(Failure::user(format!("no ego frames listed in {}", args.ego_dir.display())));
    }
    let manifest_dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(manifest_dir)?;
    let ego_prefix = relative_to(args.ego_dir, manifest_dir)?;
    let front_prefix = relative_to(args.frontal_dir, manifest_dir)?;
    for e in &mut egos {
        e.path = join(&ego_prefix, &e.path);
    }
    for f in &mut fronts {
        f.path = join(&front_prefix, &f.path);
        f.mask_path = join(&front_prefix, &f.mask_path);
    }

    let params = PairingParams {
        window: args.window,
        per_frontal: args.per_frontal,
        val_fraction: args.val_fraction,
        max_ego_frames: DEFAULT_MAX_EGO_FRAMES.max(args.per_frontal),
    };
    let mut outcome = pair_samples(&egos, &fronts, &params)?;
    outcome.report.rejected.extend(ego_rejects);
    outcome.report.rejected.extend(front_rejects);
    if outcome.manifest.is_empty() {
        return Err(Failure::user(format!(
            "no frontal frame could be paired within {}s; refusing to write an empty manifest\n{}",
            args.window,
            outcome.report.to_text()
        )));
    }
    outcome.manifest.validate_files(manifest_dir)?;
    write_atomic(args.out, outcome.manifest.to_string_pretty().as_bytes())?;
    let report = outcome.report.to_text();
    write_atomic(&drop_report_path(args.out), report.as_bytes())?;
    let stats = outcome.manifest.stats();
    eprintln!(
        "wrote {} ({} entries: {} train, {} val)",
        args.out.display(),
        outcome.manifest.len(),
        stats.train,
        stats.val
    );
    Ok((!outcome.report.is_clean()).then_some(report))
}

pub fn drop_report_path(manifest: &Path) -> PathBuf {
    let name = manifest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    manifest.with_file_name(format!("{name}.drops.txt"))
}
