use std::io::Write;
use std::path::Path;

use egofront::datapipe::{EgoFrame, FrontalFrame, FRAME_INDEX};
use egofront::toy::{self, ToyPose};
use serde::Serialize;

use crate::failure::Outcome;

/// Seconds between consecutive subjects' captures.
const SUBJECT_SPACING: f64 = 10.0;
/// Seconds between consecutive ego frames of one subject.
const FRAME_SPACING: f64 = 0.1;

fn write_index<T: Serialize>(path: &Path, records: &[T]) -> Outcome {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

/// Renders a capture-style fixture: `frontal/` and `ego/` directories with
/// PNG frames and an index each. Subject `i` is captured at
/// `i * 10 s`; its ego frames sit at 0.1 s spacing centred on that time.
pub fn write_fixture(out: &Path, subjects: usize, frames: usize, res: usize, seed: u64) -> Outcome<(usize, usize)> {
    let (fdir, edir) = (out.join("frontal"), out.join("ego"));
    std::fs::create_dir_all(&fdir)?;
    std::fs::create_dir_all(&edir)?;
    let mut fronts = Vec::new();
    let mut egos = Vec::new();
    for (i, s) in toy::generate(subjects, frames, res, seed).iter().enumerate() {
        let id = &s.subject.id;
        let t0 = i as f64 * SUBJECT_SPACING;
        s.frontal.save(fdir.join(format!("{id}.png")))?;
        s.mask.save(fdir.join(format!("{id}_mask.png")))?;
        fronts.push(FrontalFrame {
            id: id.clone(),
            path: format!("{id}.png"),
            mask_path: format!("{id}_mask.png"),
            timestamp: format!("{t0:.3}"),
            pose: ToyPose::neutral().signature(),
            subject_id: Some(id.clone()),
            clothing: s.subject.clothing,
        });
        for (k, (img, pose)) in s.egos.iter().zip(&s.poses).enumerate() {
            let name = format!("{id}_{k:03}.png");
            img.save(edir.join(&name))?;
            let t = t0 + (k as f64 - (frames as f64 - 1.0) / 2.0) * FRAME_SPACING;
            egos.push(EgoFrame {
                path: name,
                timestamp: format!("{t:.3}"),
                pose: pose.signature(),
                subject_id: Some(id.clone()),
            });
        }
    }
    write_index(&fdir.join(FRAME_INDEX), &fronts)?;
    write_index(&edir.join(FRAME_INDEX), &egos)?;
    Ok((fronts.len(), egos.len()))
}
