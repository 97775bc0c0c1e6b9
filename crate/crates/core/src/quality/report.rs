use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::clothing::ClothingAccuracy;
use super::pixel::{psnr_with_cap, ssim, PSNR_CAP_DB};
use super::regions::{Region, RegionMasks};
use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, ImageTensor};

pub const REPORT_SCHEMA: &str = "egofront.eval";
pub const REPORT_VERSION: u32 = 1;

/// Feature-space distance between two images of equal resolution.
pub trait PerceptualMetric {
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

/// Population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub perceptual: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub version: u32,
    pub regions: BTreeMap<Region, RegionStats>,
    pub sample_count: usize,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clothing: Option<ClothingAccuracy>,
}

impl EvalReport {
    pub fn region(&self, region: Region) -> &RegionStats {
        &self.regions[&region]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = format_table(&[TableRow { tags: vec![], report: self }]);
        out.push_str(&format!("\n{} samples, config {}\n", self.sample_count, self.config_hash));
        if let Some(c) = &self.clothing {
            out.push_str(&format!("clothing accuracy (lower / upper): {c}\n"));
        }
        out
    }
}

/// Blanks everything outside `mask` to the range midpoint.
fn restrict(image: &ImageTensor, mask: &BinaryMask) -> ImageTensor {
    let mid = image.range().midpoint();
    let mut data = image.data().clone();
    for ((_, y, x), v) in data.indexed_iter_mut() {
        if !mask.get(y, x) {
            *v = mid;
        }
    }
    ImageTensor::clamped(data, image.range())
}

/// Per-region mean and std of PSNR, SSIM and perceptual distance.
pub fn region_eval(
    preds: &[ImageTensor],
    truths: &[ImageTensor],
    masks: &[RegionMasks],
    perceptual: &dyn PerceptualMetric,
    psnr_cap: f64,
    config_hash: &str,
) -> Result<EvalReport> {
    if preds.is_empty() || preds.len() != truths.len() || preds.len() != masks.len() {
        return Err(Error::InvalidInput(format!(
            "need aligned non-empty sets, got {} predictions, {} targets, {} masks",
            preds.len(),
            truths.len(),
            masks.len()
        )));
    }
    let mut regions = BTreeMap::new();
    for region in Region::ALL {
        let (mut p, mut s, mut d) = (Vec::new(), Vec::new(), Vec::new());
        for ((pred, gt), m) in preds.iter().zip(truths).zip(masks) {
            let mask = m.get(region);
            p.push(psnr_with_cap(pred, gt, mask, psnr_cap)?);
            s.push(ssim(pred, gt, mask)?);
            d.push(perceptual.distance(&restrict(pred, mask), &restrict(gt, mask))?);
        }
        regions.insert(
            region,
            RegionStats { psnr: MeanStd::of(&p), ssim: MeanStd::of(&s), perceptual: MeanStd::of(&d) },
        );
    }
    Ok(EvalReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        regions,
        sample_count: preds.len(),
        config_hash: config_hash.to_string(),
        clothing: None,
    })
}

pub fn region_eval_default(
    preds: &[ImageTensor],
    truths: &[ImageTensor],
    masks: &[RegionMasks],
    perceptual: &dyn PerceptualMetric,
) -> Result<EvalReport> {
    region_eval(preds, truths, masks, perceptual, PSNR_CAP_DB, "")
}

/// One row of a combined table: leading tag columns plus a report.
pub struct TableRow<'a> {
    pub tags: Vec<(String, String)>,
    pub report: &'a EvalReport,
}

/// Markdown table with one `PSNR / SSIM / perceptual` group per body region.
pub fn format_table(rows: &[TableRow<'_>]) -> String {
    let mut header: Vec<String> = rows.first().map(|r| r.tags.iter().map(|t| t.0.clone()).collect()).unwrap_or_default();
    for region in Region::ALL {
        for metric in ["PSNR↑", "SSIM↑", "LPIPS↓"] {
            header.push(format!("{} {metric}", region.title()));
        }
    }
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for row in rows {
        let mut cells: Vec<String> = row.tags.iter().map(|t| t.1.clone()).collect();
        for region in Region::ALL {
            let s = row.report.region(region);
            cells.push(format!("{:.2} ± {:.2}", s.psnr.mean, s.psnr.std));
            cells.push(format!("{:.4} ± {:.4}", s.ssim.mean, s.ssim.std));
            cells.push(format!("{:.4} ± {:.4}", s.perceptual.mean, s.perceptual.std));
        }
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::split_regions;
    use crate::tensor::{PoseMask, ValueRange};
    use ndarray::{Array2, Array3};

    struct MeanSquare;
    impl PerceptualMetric for MeanSquare {
        fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
            Ok(a.mse(b))
        }
    }

    fn body_masks() -> RegionMasks {
        let data = Array2::from_shape_fn((24, 24), |(y, x)| if (4..20).contains(&y) && (6..18).contains(&x) { 1.0 } else { 0.0 });
        split_regions(&PoseMask::new(data, "box").unwrap(), 0.5).unwrap()
    }

    fn texture(phase: f64) -> ImageTensor {
        let data = Array3::from_shape_fn((3, 24, 24), |(c, y, x)| 0.7 * ((x + 2 * y + c) as f64 * 0.5 + phase).sin());
        ImageTensor::new(data, ValueRange::SIGNED).unwrap()
    }

    #[test]
    fn identical_sets_hit_the_caps() {
        let set = vec![texture(0.0), texture(1.0)];
        let masks = vec![body_masks(), body_masks()];
        let r = region_eval_default(&set, &set, &masks, &MeanSquare).unwrap();
        for region in Region::ALL {
            let s = r.region(region);
            assert_eq!((s.psnr.mean, s.psnr.std), (99.0, 0.0));
            assert_eq!((s.ssim.mean, s.ssim.std), (1.0, 0.0));
            assert_eq!((s.perceptual.mean, s.perceptual.std), (0.0, 0.0));
        }
    }

    #[test]
    fn two_sample_statistics() {
        let gt = vec![texture(0.0), texture(0.0)];
        let pred = vec![texture(0.1), texture(0.4)];
        let masks = vec![body_masks(), body_masks()];
        let r = region_eval_default(&pred, &gt, &masks, &MeanSquare).unwrap();
        let a = crate::quality::psnr(&pred[0], &gt[0], &masks[0].full).unwrap();
        let b = crate::quality::psnr(&pred[1], &gt[1], &masks[1].full).unwrap();
        let full = r.region(Region::Full);
        assert!((full.psnr.mean - (a + b) / 2.0).abs() < 1e-12);
        assert!((full.psnr.std - (a - b).abs() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_sample_has_zero_std() {
        let r = region_eval_default(&[texture(0.3)], &[texture(0.0)], &[body_masks()], &MeanSquare).unwrap();
        assert_eq!(r.region(Region::Upper).ssim.std, 0.0);
        assert!(r.to_table().contains("Full Body PSNR↑"));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(region_eval_default(&[texture(0.0)], &[], &[body_masks()], &MeanSquare).is_err());
    }
}
