use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, PoseMask};

pub const DEFAULT_HIP_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Full,
    Upper,
    Lower,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Full, Region::Upper, Region::Lower];

    pub fn title(&self) -> &'static str {
        match self {
            Region::Full => "Full Body",
            Region::Upper => "Upper Body",
            Region::Lower => "Lower Body",
        }
    }
}

/// Body silhouette and its split into upper and lower halves.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub full: BinaryMask,
    pub upper: BinaryMask,
    pub lower: BinaryMask,
}

impl RegionMasks {
    pub fn get(&self, region: Region) -> &BinaryMask {
        match region {
            Region::Full => &self.full,
            Region::Upper => &self.upper,
            Region::Lower => &self.lower,
        }
    }
}

/// Splits the thresholded silhouette at the hip line
/// `top + hip_fraction * bbox_height`; rows strictly above it are upper body.
pub fn split_regions(mask: &PoseMask, hip_fraction: f64) -> Result<RegionMasks> {
    if !(0.0..=1.0).contains(&hip_fraction) {
        return Err(Error::InvalidInput(format!("hip_fraction {hip_fraction} outside [0, 1]")));
    }
    let full = mask.threshold();
    let rows: Vec<usize> = full
        .0
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|v| *v))
        .map(|(i, _)| i)
        .collect();
    let (top, bottom) = match (rows.first(), rows.last()) {
        (Some(t), Some(b)) => (*t, *b),
        _ => return Err(Error::InvalidInput("empty silhouette".into())),
    };
    let hip_line = top as f64 + hip_fraction * (bottom - top + 1) as f64;

    let mut upper = full.clone();
    let mut lower = full.clone();
    for ((y, _), v) in upper.0.indexed_iter_mut() {
        *v = *v && (y as f64) < hip_line;
    }
    for ((y, _), v) in lower.0.indexed_iter_mut() {
        *v = *v && (y as f64) >= hip_line;
    }
    Ok(RegionMasks { full, upper, lower })
}
