use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{ImageTensor, PoseMask};

/// Ranges for the joint frontal image/mask perturbation and the independent
/// ego rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRanges {
    pub zoom_max: f64,
    /// Maximum center shift as a fraction of the frame size.
    pub shift_max: f64,
    pub frontal_rotation_deg: f64,
    pub ego_rotation_deg: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self { zoom_max: 1.15, shift_max: 0.05, frontal_rotation_deg: 5.0, ego_rotation_deg: 10.0 }
    }
}

/// Zoom-in, center shift and rotation applied about the frame center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub zoom: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub rotation_deg: f64,
}

impl FrameTransform {
    pub const IDENTITY: FrameTransform = FrameTransform { zoom: 1.0, shift_x: 0.0, shift_y: 0.0, rotation_deg: 0.0 };

    pub fn rotation(deg: f64) -> Self {
        Self { rotation_deg: deg, ..Self::IDENTITY }
    }

    /// Forces every parameter inside the frontal ranges.
    pub fn clamped(self, ranges: &AugmentRanges) -> Self {
        let zoom_max = ranges.zoom_max.max(1.0);
        Self {
            zoom: self.zoom.clamp(1.0, zoom_max),
            shift_x: self.shift_x.clamp(-ranges.shift_max, ranges.shift_max),
            shift_y: self.shift_y.clamp(-ranges.shift_max, ranges.shift_max),
            rotation_deg: self.rotation_deg.clamp(-ranges.frontal_rotation_deg, ranges.frontal_rotation_deg),
        }
    }

    /// Source coordinate (in pixels) sampled by output pixel `(x, y)`.
    fn source(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = (w / 2.0, h / 2.0);
        let u = (x + 0.5 - cx) - self.shift_x * w;
        let v = (y + 0.5 - cy) - self.shift_y * h;
        let (s, c) = (-self.rotation_deg.to_radians()).sin_cos();
        let (ru, rv) = (c * u - s * v, s * u + c * v);
        (ru / self.zoom + cx - 0.5, rv / self.zoom + cy - 0.5)
    }

    /// Bilinear resampling of one plane with replicated borders.
    pub fn warp_plane(&self, plane: &Array2<f64>) -> Array2<f64> {
        let (h, w) = plane.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let (sx, sy) = self.source(x as f64, y as f64, w, h);
            bilinear(plane, sx, sy)
        })
    }

    pub fn warp(&self, data: &Array3<f64>) -> Array3<f64> {
        let mut out = data.clone();
        for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(data.axis_iter(Axis(0))) {
            dst.assign(&self.warp_plane(&src.to_owned()));
        }
        out
    }
}

fn bilinear(plane: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = plane.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
    let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontalAugment {
    pub image: ImageTensor,
    pub mask: PoseMask,
    /// Parameters used, or `None` when the identity branch was taken.
    pub transform: Option<FrameTransform>,
}

/// Applies one jointly parameterised transform to the frontal image and its
/// mask with probability `q`.
pub fn augment_frontal(
    image: &ImageTensor,
    mask: &PoseMask,
    q: f64,
    ranges: &AugmentRanges,
    seed: u64,
) -> Result<FrontalAugment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !(rng.random::<f64>() < q) {
        return Ok(FrontalAugment { image: image.clone(), mask: mask.clone(), transform: None });
    }
    let zoom_max = ranges.zoom_max.max(1.0);
    let transform = FrameTransform {
        zoom: 1.0 + rng.random::<f64>() * (zoom_max - 1.0),
        shift_x: rng.random_range(-1.0..=1.0) * ranges.shift_max,
        shift_y: rng.random_range(-1.0..=1.0) * ranges.shift_max,
        rotation_deg: rng.random_range(-1.0..=1.0) * ranges.frontal_rotation_deg,
    }
    .clamped(ranges);
    Ok(FrontalAugment {
        image: apply_to_image(image, &transform),
        mask: apply_to_mask(mask, &transform)?,
        transform: Some(transform),
    })
}

pub fn apply_to_image(image: &ImageTensor, transform: &FrameTransform) -> ImageTensor {
    ImageTensor::clamped(transform.warp(image.data()), image.range())
}

pub fn apply_to_mask(mask: &PoseMask, transform: &FrameTransform) -> Result<PoseMask> {
    let warped = transform.warp_plane(mask.data()).mapv(|v| v.clamp(0.0, 1.0));
    PoseMask::new(warped, mask.source.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgoAugment {
    pub image: ImageTensor,
    pub rotation_deg: Option<f64>,
}

/// Rotates the ego image alone, with probability `p`, by an angle uniform in
/// `±ego_rotation_deg`.
pub fn augment_ego(ego: &ImageTensor, p: f64, ranges: &AugmentRanges, seed: u64) -> EgoAugment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !(rng.random::<f64>() < p) {
        return EgoAugment { image: ego.clone(), rotation_deg: None };
    }
    let angle = rng.random_range(-1.0..=1.0) * ranges.ego_rotation_deg;
    EgoAugment { image: apply_to_image(ego, &FrameTransform::rotation(angle)), rotation_deg: Some(angle) }
}
