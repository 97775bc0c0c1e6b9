use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Conv2d;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamGroup, ParamStore};
use crate::quality::PerceptualMetric;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualSpec {
    /// Channel width of each feature stage; every stage after the first
    /// halves the resolution.
    pub widths: Vec<usize>,
    /// Weight seed. Fixed by default so distances are comparable across runs.
    pub seed: u64,
}

impl Default for PerceptualSpec {
    fn default() -> Self {
        Self { widths: vec![16, 32, 64], seed: 0x1f2e_3d4c }
    }
}

/// Feature-space distance under a fixed, randomly initialised conv net.
///
/// Per stage, features are unit-normalised across channels; the distance
/// is the spatial mean of squared differences, summed over stages.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    convs: Vec<Conv2d>,
    dtype: DType,
    device: Device,
}

impl PerceptualNet {
    pub fn new(spec: &PerceptualSpec, dtype: DType, device: &Device) -> Result<Self> {
        if spec.widths.is_empty() || spec.widths.contains(&0) {
            return Err(Error::Config("perceptual net needs positive stage widths".into()));
        }
        let mut store = ParamStore::new(dtype, device.clone(), spec.seed);
        let mut b = store.builder("perceptual", ParamGroup::Codec);
        let mut convs = Vec::new();
        let mut prev = 3;
        for (i, &w) in spec.widths.iter().enumerate() {
            convs.push(b.pp(i).conv3(prev, w, if i == 0 { 1 } else { 2 })?);
            prev = w;
        }
        Ok(Self { convs, dtype, device: device.clone() })
    }

    /// Per-sample distances `[B]` between two `[B, 3, H, W]` batches.
    pub fn distance_tensor(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dims() != b.dims() {
            return Err(Error::ShapeMismatch(format!("perceptual inputs {:?} vs {:?}", a.dims(), b.dims())));
        }
        let (mut fa, mut fb) = (a.clone(), b.clone());
        let mut total: Option<Tensor> = None;
        for conv in &self.convs {
            fa = conv.forward(&fa)?.relu()?;
            fb = conv.forward(&fb)?.relu()?;
            let d = (unit_normalise(&fa)? - unit_normalise(&fb)?)?
                .sqr()?
                .sum(1)?
                .flatten_from(1)?
                .mean(D::Minus1)?;
            total = Some(match total {
                Some(t) => (t + d)?,
                None => d,
            });
        }
        Ok(total.expect("at least one stage"))
    }
}

fn unit_normalise(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

impl PerceptualMetric for PerceptualNet {
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch(format!("images {:?} vs {:?}", a.shape(), b.shape())));
        }
        let x = nn::images_to_tensor(&[a], self.dtype, &self.device)?;
        let y = nn::images_to_tensor(&[b], self.dtype, &self.device)?;
        let d = self.distance_tensor(&x, &y)?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
        Ok(d.max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::ValueRange;

    fn net() -> PerceptualNet {
        PerceptualNet::new(&PerceptualSpec::default(), DType::F32, &Device::Cpu).unwrap()
    }

    fn noisy(base: &ImageTensor, sigma: f64, rng: &mut ChaCha8Rng) -> ImageTensor {
        let data = base.data().mapv(|v| v + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal));
        ImageTensor::clamped(data, ValueRange::SIGNED)
    }

    #[test]
    fn identity_and_symmetry() {
        let net = net();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = crate::toy::generate(1, 1, 32, 4).remove(0).frontal;
        let b = noisy(&a, 0.3, &mut rng);
        assert_eq!(net.distance(&a, &a).unwrap(), 0.0);
        assert_eq!(net.distance(&a, &b).unwrap(), net.distance(&b, &a).unwrap());
        assert!(net.distance(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn stronger_corruption_is_farther() {
        let net = net();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for sample in crate::toy::generate(20, 1, 32, 9) {
            let a = sample.frontal;
            let weak = noisy(&a, 0.05, &mut rng);
            let strong = noisy(&a, 0.5, &mut rng);
            assert!(net.distance(&a, &strong).unwrap() > net.distance(&a, &weak).unwrap());
        }
    }

    #[test]
    fn rejects_mismatched_resolution() {
        let a = ImageTensor::new(Array3::zeros((3, 16, 16)), ValueRange::SIGNED).unwrap();
        let b = ImageTensor::new(Array3::zeros((3, 32, 32)), ValueRange::SIGNED).unwrap();
        assert!(net().distance(&a, &b).is_err());
    }
}
