use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datapipe::ClothingLabels;
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Infers coarse garment types from a generated frontal image.
pub trait ClothingClassifier {
    fn classify(&self, image: &ImageTensor) -> Result<ClothingLabels>;
}

/// Per-region share of exact garment-type matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClothingAccuracy {
    pub lower_matches: usize,
    pub upper_matches: usize,
    pub total: usize,
    /// Rounded to the nearest integer percent.
    pub lower_pct: u32,
    pub upper_pct: u32,
}

fn rounded_percent(matches: usize, total: usize) -> u32 {
    ((matches * 100 + total / 2) / total) as u32
}

impl fmt::Display for ClothingAccuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}% / {}%", self.lower_pct, self.upper_pct)
    }
}

pub fn clothing_accuracy(predicted: &[ClothingLabels], truth: &[ClothingLabels]) -> Result<ClothingAccuracy> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "need equal-length non-empty label lists, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let lower = predicted.iter().zip(truth).filter(|(p, t)| p.lower == t.lower).count();
    let upper = predicted.iter().zip(truth).filter(|(p, t)| p.upper == t.upper).count();
    let total = truth.len();
    Ok(ClothingAccuracy {
        lower_matches: lower,
        upper_matches: upper,
        total,
        lower_pct: rounded_percent(lower, total),
        upper_pct: rounded_percent(upper, total),
    })
}

/// Same as [`clothing_accuracy`] on raw `(lower, upper)` strings; any label
/// outside the closed vocabularies is rejected.
pub fn clothing_accuracy_from_str(predicted: &[(&str, &str)], truth: &[(&str, &str)]) -> Result<ClothingAccuracy> {
    let parse = |pairs: &[(&str, &str)]| -> Result<Vec<ClothingLabels>> {
        pairs
            .iter()
            .map(|(l, u)| Ok(ClothingLabels { lower: l.parse()?, upper: u.parse()? }))
            .collect()
    };
    clothing_accuracy(&parse(predicted)?, &parse(truth)?)
}
