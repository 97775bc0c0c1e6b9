use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA: &str = "egofront.manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_MAX_EGO_FRAMES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowerGarment {
    Shorts,
    Pants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpperGarment {
    Tshirt,
    Sweater,
}

impl FromStr for LowerGarment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "shorts" => Ok(Self::Shorts),
            "pants" => Ok(Self::Pants),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

impl FromStr for UpperGarment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tshirt" => Ok(Self::Tshirt),
            "sweater" => Ok(Self::Sweater),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

impl fmt::Display for LowerGarment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Shorts => "shorts",
            Self::Pants => "pants",
        })
    }
}

impl fmt::Display for UpperGarment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tshirt => "tshirt",
            Self::Sweater => "sweater",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClothingLabels {
    pub lower: LowerGarment,
    pub upper: UpperGarment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

/// One frontal target bound to its egocentric frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairedSample {
    pub frontal_id: String,
    pub frontal_path: String,
    pub pose_mask_path: String,
    pub ego_paths: Vec<String>,
    /// Frontal capture time followed by one entry per ego frame, in seconds.
    pub timestamps: Vec<f64>,
    pub subject_id: String,
    pub clothing_labels: ClothingLabels,
    pub pose_signature: Vec<f64>,
}

impl PairedSample {
    pub fn frontal_timestamp(&self) -> f64 {
        self.timestamps[0]
    }

    pub fn ego_timestamps(&self) -> &[f64] {
        &self.timestamps[1..]
    }

    /// Structural checks that need no filesystem access.
    pub fn validate(&self, max_ego_frames: usize, window: Option<f64>) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidSample { id: self.frontal_id.clone(), reason });
        if self.ego_paths.is_empty() || self.ego_paths.len() > max_ego_frames {
            return fail(format!(
                "{} ego frames, expected 1..={max_ego_frames}",
                self.ego_paths.len()
            ));
        }
        if self.timestamps.len() != self.ego_paths.len() + 1 {
            return fail("timestamp count must be ego frame count + 1".into());
        }
        if let Some(window) = window {
            let t0 = self.frontal_timestamp();
            if let Some(t) = self.ego_timestamps().iter().find(|t| (**t - t0).abs() > window) {
                return fail(format!("ego timestamp {t} outside {window}s window around {t0}"));
            }
        }
        Ok(())
    }
}

/// Deterministic train/val assignment keyed only by the frontal id.
pub fn split_for_id(frontal_id: &str, val_fraction: f64) -> Split {
    let digest = Sha256::digest(frontal_id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    let u = u64::from_be_bytes(head) as f64 / u64::MAX as f64;
    if u < val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema: String,
    pub version: u32,
    pub val_fraction: f64,
    pub max_ego_frames: usize,
    /// Pairing window in seconds, when known.
    pub window: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    split: Split,
    #[serde(flatten)]
    sample: PairedSample,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SplitStats {
    pub train: usize,
    pub val: usize,
}

/// Paired samples plus their split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    entries: Vec<PairedSample>,
    splits: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn new(
        mut entries: Vec<PairedSample>,
        val_fraction: f64,
        max_ego_frames: usize,
        window: Option<f64>,
    ) -> Result<Self> {
        entries.sort_by(|a, b| a.frontal_id.cmp(&b.frontal_id));
        if let Some(dup) = entries.windows(2).find(|w| w[0].frontal_id == w[1].frontal_id) {
            return Err(Error::Manifest(format!("duplicate frontal id `{}`", dup[0].frontal_id)));
        }
        for e in &entries {
            e.validate(max_ego_frames, window)?;
        }
        let splits = entries
            .iter()
            .map(|e| (e.frontal_id.clone(), split_for_id(&e.frontal_id, val_fraction)))
            .collect();
        Ok(Self {
            header: ManifestHeader {
                schema: MANIFEST_SCHEMA.into(),
                version: MANIFEST_VERSION,
                val_fraction,
                max_ego_frames,
                window,
            },
            entries,
            splits,
        })
    }

    pub fn entries(&self) -> &[PairedSample] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn split_of(&self, frontal_id: &str) -> Option<Split> {
        self.splits.get(frontal_id).copied()
    }

    pub fn split_entries(&self, split: Split) -> Vec<&PairedSample> {
        self.entries.iter().filter(|e| self.splits[&e.frontal_id] == split).collect()
    }

    pub fn stats(&self) -> SplitStats {
        let mut s = SplitStats::default();
        for split in self.splits.values() {
            match split {
                Split::Train => s.train += 1,
                Split::Val => s.val += 1,
            }
        }
        s
    }

    /// Checks that every referenced file exists below `root`.
    pub fn validate_files(&self, root: &Path) -> Result<()> {
        let mut missing = Vec::new();
        for e in &self.entries {
            let paths = [&e.frontal_path, &e.pose_mask_path].into_iter().chain(e.ego_paths.iter());
            for p in paths {
                if !root.join(p).is_file() {
                    missing.push(p.clone());
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Manifest(format!(
                "{} referenced files missing (first: {})",
                missing.len(),
                missing[0]
            )))
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            let rec = ManifestRecord { split: self.splits[&e.frontal_id], sample: e.clone() };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_string_pretty(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
        let (_, first) = lines.next().ok_or_else(|| Error::Manifest("empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(&first?)
            .map_err(|e| Error::Manifest(format!("bad header: {e}")))?;
        if header.schema != MANIFEST_SCHEMA {
            return Err(Error::Manifest(format!("unexpected schema `{}`", header.schema)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                header.version
            )));
        }
        let mut entries = Vec::new();
        let mut recorded = BTreeMap::new();
        for (lineno, line) in lines {
            let rec: ManifestRecord = serde_json::from_str(&line?)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
            recorded.insert(rec.sample.frontal_id.clone(), rec.split);
            entries.push(rec.sample);
        }
        let manifest = Self::new(entries, header.val_fraction, header.max_ego_frames, header.window)?;
        for (id, split) in &recorded {
            if manifest.splits[id] != *split {
                return Err(Error::Manifest(format!("frontal id `{id}` recorded in the wrong split")));
            }
        }
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
