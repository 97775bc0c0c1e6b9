//! Plain (framework-free) latent, image and mask containers.
//!
//! Everything here is `channels x height x width` in `f64`. The trainable
//! networks convert to framework tensors at their boundary.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A compressed latent representation `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Array3<f64>,
    /// Codec scaling factor applied at encode time.
    scale: f64,
}

impl LatentTensor {
    pub fn new(data: Array3<f64>, scale: f64) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::OutOfRange(format!("latent contains non-finite value {bad}")));
        }
        Ok(Self { data, scale })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self { data: Array3::zeros(shape), scale: 1.0 }
    }

    pub fn filled(shape: (usize, usize, usize), value: f64) -> Self {
        Self { data: Array3::from_elem(shape, value), scale: 1.0 }
    }

    /// Standard normal draws.
    pub fn randn<R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> Self {
        let data = Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal));
        Self { data, scale: 1.0 }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Declared value range of an image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    /// The canonical `[-1, 1]` range.
    pub const SIGNED: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Maps `v` linearly into `[0, 1]`.
    pub fn to_unit(&self, v: f64) -> f64 {
        (v - self.lo) / self.width()
    }
}

/// Pixel-space image `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>, range: ValueRange) -> Result<Self> {
        if range.width() <= 0.0 {
            return Err(Error::InvalidInput(format!("empty value range {range:?}")));
        }
        if let Some(bad) = data.iter().find(|v| !range.contains(**v)) {
            return Err(Error::OutOfRange(format!(
                "pixel value {bad} outside [{}, {}]",
                range.lo, range.hi
            )));
        }
        Ok(Self { data, range })
    }

    /// Builds an image by clamping every value into `range`.
    pub fn clamped(mut data: Array3<f64>, range: ValueRange) -> Self {
        data.mapv_inplace(|v| if v.is_nan() { range.midpoint() } else { v.clamp(range.lo, range.hi) });
        Self { data, range }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((channels, height, width), value), ValueRange::SIGNED)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    /// `(height, width)` in pixels.
    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Re-expresses the image in another value range.
    pub fn to_range(&self, range: ValueRange) -> ImageTensor {
        let src = self.range;
        let data = self.data.mapv(|v| range.lo + src.to_unit(v) * range.width());
        ImageTensor::clamped(data, range)
    }

    /// Interleaved 8-bit RGB(A) bytes, mapped linearly from the declared range.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (c, h, w) = self.data.dim();
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = self.data[[ch.min(c - 1), y, x]];
                    out.push((self.range.to_unit(v) * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    /// Inverse of [`ImageTensor::to_rgb8`] into the canonical range.
    pub fn from_rgb8(bytes: &[u8], width: usize, height: usize) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} RGB bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let data = Array3::from_shape_fn((3, height, width), |(c, y, x)| {
            bytes[(y * width + x) * 3 + c] as f64 / 255.0 * 2.0 - 1.0
        });
        Ok(Self { data, range: ValueRange::SIGNED })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mse(&self, other: &Self) -> f64 {
        let n = self.data.len() as f64;
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
    }

    /// Places images side by side, separated by a one pixel gutter.
    pub fn side_by_side(images: &[&ImageTensor]) -> Result<ImageTensor> {
        let h = images.iter().map(|i| i.resolution().0).max().unwrap_or(0);
        let w: usize = images.iter().map(|i| i.resolution().1).sum::<usize>() + images.len().saturating_sub(1);
        let mut data = Array3::from_elem((3, h, w), 1.0);
        let mut x0 = 0;
        for img in images {
            let img = img.to_range(ValueRange::SIGNED);
            let (c, ih, iw) = img.shape();
            for ch in 0..3 {
                for y in 0..ih {
                    for x in 0..iw {
                        data[[ch, y, x0 + x]] = img.data[[ch.min(c - 1), y, x]];
                    }
                }
            }
            x0 += iw + 1;
        }
        ImageTensor::new(data, ValueRange::SIGNED)
    }
}

#[cfg(feature = "io")]
impl ImageTensor {
    /// Loads an 8-bit image file as RGB in the canonical range.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(img.as_raw(), w as usize, h as usize)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let (h, w) = self.resolution();
        let buf = image::RgbImage::from_raw(w as u32, h as u32, self.to_rgb8())
            .expect("buffer length matches resolution");
        buf.save(path)?;
        Ok(())
    }
}

/// Single-channel silhouette of the target body in `[0, 1]`, registered to
/// the frontal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMask {
    data: Array2<f64>,
    /// Free-form description of how the silhouette was produced.
    pub source: String,
}

impl PoseMask {
    pub fn new(data: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(format!("pose mask value {bad} outside [0, 1]")));
        }
        Ok(Self { data, source: source.into() })
    }

    /// Fails unless at least one pixel exceeds 0.5.
    pub fn validate_foreground(&self) -> Result<()> {
        if self.data.iter().any(|v| *v > 0.5) {
            Ok(())
        } else {
            Err(Error::InvalidInput("pose mask has no foreground pixel".into()))
        }
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn threshold(&self) -> BinaryMask {
        BinaryMask(self.data.mapv(|v| v > 0.5))
    }

    /// The mask as a one-channel image in `[0, 1]`.
    pub fn to_image(&self) -> ImageTensor {
        let data = self.data.clone().insert_axis(Axis(0));
        ImageTensor { data, range: ValueRange::UNIT }
    }

    /// Reads channel 0 of an image, mapped to `[0, 1]`.
    pub fn from_image(image: &ImageTensor, source: impl Into<String>) -> Self {
        let r = image.range();
        let data = image.data().index_axis(Axis(0), 0).mapv(|v| r.to_unit(v).clamp(0.0, 1.0));
        Self { data, source: source.into() }
    }

    #[cfg(feature = "io")]
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0
        });
        Ok(Self { data, source: path.display().to_string() })
    }

    #[cfg(feature = "io")]
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let (h, w) = self.resolution();
        let raw: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        image::GrayImage::from_raw(w as u32, h as u32, raw)
            .expect("buffer length matches resolution")
            .save(path)?;
        Ok(())
    }
}

/// Binary region mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<bool>);

impl BinaryMask {
    pub fn full(height: usize, width: usize) -> Self {
        Self(Array2::from_elem((height, width), true))
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.0[[y, x]]
    }

    pub fn and(&self, other: &Self) -> Self {
        Self(ndarray::Zip::from(&self.0).and(&other.0).map_collect(|a, b| *a && *b))
    }

    pub fn or(&self, other: &Self) -> Self {
        Self(ndarray::Zip::from(&self.0).and(&other.0).map_collect(|a, b| *a || *b))
    }

    pub fn intersection_over_union(&self, other: &Self) -> f64 {
        let union = self.or(other).count();
        if union == 0 {
            return 1.0;
        }
        self.and(other).count() as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageTensor::from_rgb8(&bytes, 4, 3).unwrap();
        assert_eq!(img.resolution(), (3, 4));
        assert_eq!(img.to_rgb8(), bytes);
    }

    #[test]
    fn image_rejects_out_of_range() {
        let data = Array3::from_elem((1, 2, 2), 1.5);
        assert!(matches!(ImageTensor::new(data, ValueRange::SIGNED), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn clamped_maps_to_boundary() {
        let data = Array3::from_shape_vec((1, 1, 3), vec![-3.0, 0.25, 7.0]).unwrap();
        let img = ImageTensor::clamped(data, ValueRange::SIGNED);
        assert_eq!(img.data().iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.25, 1.0]);
    }

    #[test]
    fn latent_rejects_nan() {
        let data = Array3::from_elem((1, 1, 1), f64::NAN);
        assert!(LatentTensor::new(data, 1.0).is_err());
    }

    #[test]
    fn empty_pose_mask_fails_foreground_check() {
        let m = PoseMask::new(Array2::zeros((4, 4)), "blank").unwrap();
        assert!(m.validate_foreground().is_err());
    }
}
