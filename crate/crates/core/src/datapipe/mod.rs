//! Dataset manifests, ego/frontal pairing and the two training-time
//! augmentations.

mod augment;
mod manifest;
mod pairing;

use std::io::BufRead;
use std::path::Path;

use serde::de::DeserializeOwned;

pub use augment::{
    apply_to_image, apply_to_mask, augment_ego, augment_frontal, AugmentRanges, EgoAugment, FrameTransform,
    FrontalAugment,
};
pub use manifest::{
    split_for_id, ClothingLabels, DatasetManifest, LowerGarment, ManifestHeader, PairedSample, Split, SplitStats,
    UpperGarment, DEFAULT_MAX_EGO_FRAMES, MANIFEST_SCHEMA, MANIFEST_VERSION,
};
pub use pairing::{
    pair_samples, pose_similarity, DropReport, DroppedFrontal, EgoFrame, FrontalFrame, PairingOutcome,
    PairingParams, RejectedRecord,
};

use crate::error::Result;

/// Name of the per-directory capture index read by [`read_frame_index`].
pub const FRAME_INDEX: &str = "index.jsonl";

/// Reads a line-delimited index of frame records. Lines that fail to parse
/// are returned as rejections rather than aborting the whole read.
pub fn read_frame_index<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, Vec<RejectedRecord>)> {
    let file = std::fs::File::open(path)?;
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(r) => records.push(r),
            Err(e) => rejected.push(RejectedRecord {
                path: format!("{}:{}", path.display(), i + 1),
                reason: e.to_string(),
            }),
        }
    }
    Ok((records, rejected))
}
