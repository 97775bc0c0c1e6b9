use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::manifest::{ClothingLabels, DatasetManifest, PairedSample};
use crate::error::{Error, Result};

/// One egocentric frame as read from a capture index. The timestamp is kept
/// raw so that unparseable records can be reported individually.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoFrame {
    pub path: String,
    #[serde(deserialize_with = "raw_timestamp")]
    pub timestamp: String,
    #[serde(default)]
    pub pose: Vec<f64>,
    #[serde(default)]
    pub subject_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontalFrame {
    pub id: String,
    pub path: String,
    pub mask_path: String,
    #[serde(deserialize_with = "raw_timestamp")]
    pub timestamp: String,
    #[serde(default)]
    pub pose: Vec<f64>,
    #[serde(default)]
    pub subject_id: Option<String>,
    pub clothing: ClothingLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingParams {
    /// Maximum |t_ego - t_frontal| in seconds.
    pub window: f64,
    pub per_frontal: usize,
    pub val_fraction: f64,
    pub max_ego_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedFrontal {
    pub frontal_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRecord {
    pub path: String,
    pub reason: String,
}

/// Frontal frames that received no partner, and records that could not be read.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DropReport {
    pub dropped: Vec<DroppedFrontal>,
    pub rejected: Vec<RejectedRecord>,
}

impl DropReport {
    pub fn is_clean(&self) -> bool {
        self.dropped.is_empty() && self.rejected.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "dropped_frontal: {}\nrejected_records: {}\n",
            self.dropped.len(),
            self.rejected.len()
        );
        for d in &self.dropped {
            out.push_str(&format!("drop\t{}\t{}\n", d.frontal_id, d.reason));
        }
        for r in &self.rejected {
            out.push_str(&format!("reject\t{}\t{}\n", r.path, r.reason));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingOutcome {
    pub manifest: DatasetManifest,
    pub report: DropReport,
}

/// Negative mean distance between corresponding 2D joints. Signatures are
/// flat `[x0, y0, x1, y1, ...]`; empty or mismatched signatures compare as
/// equal so that matching falls back to time alone.
pub fn pose_similarity(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || a.len() != b.len() || a.len() % 2 != 0 {
        return 0.0;
    }
    let joints = a.len() / 2;
    let total: f64 = a
        .chunks_exact(2)
        .zip(b.chunks_exact(2))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum();
    -total / joints as f64
}

/// Accepts a JSON number or string and keeps its text.
fn raw_timestamp<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    match serde_json::Value::deserialize(d)? {
        serde_json::Value::String(s) => Ok(s),
        other => Ok(other.to_string()),
    }
}

fn parse_timestamp(raw: &str) -> std::result::Result<f64, String> {
    match raw.trim().parse::<f64>() {
        Ok(t) if t.is_finite() => Ok(t),
        Ok(t) => Err(format!("non-finite timestamp {t}")),
        Err(e) => Err(format!("unparseable timestamp `{raw}`: {e}")),
    }
}

fn check_monotone(ts: &[f64], what: &str) -> Result<()> {
    if let Some(i) = ts.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput(format!(
            "{what} timestamps not monotone at record {}",
            i + 1
        )));
    }
    Ok(())
}

/// Pairs every frontal frame with up to `per_frontal` ego frames inside the
/// time window, ranked by pose similarity first and temporal proximity second.
pub fn pair_samples(ego: &[EgoFrame], frontal: &[FrontalFrame], params: &PairingParams) -> Result<PairingOutcome> {
    if params.per_frontal == 0 || params.per_frontal > params.max_ego_frames {
        return Err(Error::InvalidInput(format!(
            "per_frontal must lie in 1..={}",
            params.max_ego_frames
        )));
    }
    if !(params.window >= 0.0) {
        return Err(Error::InvalidInput("window must be non-negative".into()));
    }
    let mut report = DropReport::default();

    let mut egos: Vec<(f64, &EgoFrame)> = Vec::new();
    for e in ego {
        match parse_timestamp(&e.timestamp) {
            Ok(t) => egos.push((t, e)),
            Err(reason) => report.rejected.push(RejectedRecord { path: e.path.clone(), reason }),
        }
    }
    let mut fronts: Vec<(f64, &FrontalFrame)> = Vec::new();
    for f in frontal {
        match parse_timestamp(&f.timestamp) {
            Ok(t) => fronts.push((t, f)),
            Err(reason) => report.rejected.push(RejectedRecord { path: f.path.clone(), reason }),
        }
    }
    check_monotone(&egos.iter().map(|e| e.0).collect::<Vec<_>>(), "ego")?;
    check_monotone(&fronts.iter().map(|f| f.0).collect::<Vec<_>>(), "frontal")?;

    let mut entries = Vec::new();
    for (t_front, f) in &fronts {
        let mut candidates: Vec<(f64, f64, usize)> = egos
            .iter()
            .enumerate()
            .filter(|(_, (t, e))| {
                (t - t_front).abs() <= params.window
                    && match (&e.subject_id, &f.subject_id) {
                        (Some(a), Some(b)) => a == b,
                        _ => true,
                    }
            })
            .map(|(i, (t, e))| (pose_similarity(&e.pose, &f.pose), (t - t_front).abs(), i))
            .collect();
        if candidates.is_empty() {
            report.dropped.push(DroppedFrontal {
                frontal_id: f.id.clone(),
                reason: format!("no ego frame within {}s", params.window),
            });
            continue;
        }
        // Higher similarity first, then smaller time gap, then stream order.
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
                .then(a.2.cmp(&b.2))
        });
        candidates.truncate(params.per_frontal);
        // Chronological order inside a record.
        candidates.sort_by_key(|c| c.2);

        let mut timestamps = vec![*t_front];
        let mut ego_paths = Vec::new();
        for (_, _, i) in &candidates {
            timestamps.push(egos[*i].0);
            ego_paths.push(egos[*i].1.path.clone());
        }
        entries.push(PairedSample {
            frontal_id: f.id.clone(),
            frontal_path: f.path.clone(),
            pose_mask_path: f.mask_path.clone(),
            ego_paths,
            timestamps,
            subject_id: f.subject_id.clone().unwrap_or_default(),
            clothing_labels: f.clothing,
            pose_signature: f.pose.clone(),
        });
    }
    let manifest = DatasetManifest::new(entries, params.val_fraction, params.max_ego_frames, Some(params.window))?;
    Ok(PairingOutcome { manifest, report })
}
