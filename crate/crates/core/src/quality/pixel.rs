use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, ImageTensor};

/// Reported PSNR for zero-error pairs.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(pred: &ImageTensor, gt: &ImageTensor, mask: &BinaryMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape())));
    }
    if pred.range() != gt.range() {
        return Err(Error::InvalidInput(format!(
            "value ranges differ: {:?} vs {:?}",
            pred.range(),
            gt.range()
        )));
    }
    if mask.resolution() != pred.resolution() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs image {:?}",
            mask.resolution(),
            pred.resolution()
        )));
    }
    if mask.is_empty() {
        return Err(Error::InvalidInput("empty evaluation mask".into()));
    }
    Ok(())
}

/// Mean squared error over masked pixels (all channels), after mapping the
/// declared range onto `[0, 1]`.
pub fn masked_mse(pred: &ImageTensor, gt: &ImageTensor, mask: &BinaryMask) -> Result<f64> {
    check_pair(pred, gt, mask)?;
    let range = pred.range();
    let (c, h, w) = pred.shape();
    let (mut sum, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    let d = range.to_unit(pred.data()[[ch, y, x]]) - range.to_unit(gt.data()[[ch, y, x]]);
                    sum += d * d;
                    n += 1;
                }
            }
        }
    }
    Ok(sum / n as f64)
}

/// `10 log10(1 / mse)` on unit-mapped values, capped at `cap`.
pub fn psnr_with_cap(pred: &ImageTensor, gt: &ImageTensor, mask: &BinaryMask, cap: f64) -> Result<f64> {
    let mse = masked_mse(pred, gt, mask)?;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

pub fn psnr(pred: &ImageTensor, gt: &ImageTensor, mask: &BinaryMask) -> Result<f64> {
    psnr_with_cap(pred, gt, mask, PSNR_CAP_DB)
}

fn gaussian_window() -> Array2<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(y, x)| {
        let (dy, dx) = (y as f64 - r, x as f64 - r);
        (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let total = w.sum();
    w / total
}

/// Windowed SSIM with an 11x11 Gaussian window (sigma 1.5) and the usual
/// `K1 = 0.01`, `K2 = 0.03` constants, averaged over channels and over every
/// fully-contained window whose center lies in the mask.
pub fn ssim(pred: &ImageTensor, gt: &ImageTensor, mask: &BinaryMask) -> Result<f64> {
    check_pair(pred, gt, mask)?;
    let (c, h, w) = pred.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let range = pred.range();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let window = gaussian_window();
    let r = SSIM_WINDOW / 2;

    let centers: Vec<(usize, usize)> = (r..h - r)
        .flat_map(|y| (r..w - r).map(move |x| (y, x)))
        .filter(|&(y, x)| mask.get(y, x))
        .collect();
    if centers.is_empty() {
        return Err(Error::InvalidInput("no SSIM window center lies inside the mask".into()));
    }

    let (mut total, mut count) = (0.0, 0usize);
    for ch in 0..c {
        let a = pred.data().index_axis(Axis(0), ch).mapv(|v| range.to_unit(v));
        let b = gt.data().index_axis(Axis(0), ch).mapv(|v| range.to_unit(v));
        for &(cy, cx) in &centers {
            let (mut mu_a, mut mu_b, mut e_aa, mut e_bb, mut e_ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let k = window[[wy, wx]];
                    let (y, x) = (cy + wy - r, cx + wx - r);
                    let (va, vb) = (a[[y, x]], b[[y, x]]);
                    mu_a += k * va;
                    mu_b += k * vb;
                    e_aa += k * (va * va);
                    e_bb += k * (vb * vb);
                    e_ab += k * (va * vb);
                }
            }
            let var_a = e_aa - mu_a * mu_a;
            let var_b = e_bb - mu_b * mu_b;
            let cov = e_ab - mu_a * mu_b;
            let num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
