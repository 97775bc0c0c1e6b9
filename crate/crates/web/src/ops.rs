//! The demo operations in plain Rust, shared by the wasm exports and the
//! native tests.

use egofront::datapipe::{augment_ego, augment_frontal, AugmentRanges, FrameTransform};
use egofront::quality::{borda_aggregate, parse_ballots, RankAggregate};
use egofront::schedule::forward_noise;
use egofront::{Error, ImageTensor, LatentTensor, PoseMask, Result, ScheduleParams, ValueRange};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Largest preview resolution the page may request.
pub const MAX_RESOLUTION: usize = 256;

/// Interleaved 8-bit RGBA pixels, ready for a canvas `ImageData`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rgba {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgba {
    pub fn from_image(image: &ImageTensor) -> Self {
        let (height, width) = image.resolution();
        let data = image.to_rgb8().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect();
        Self { width, height, data }
    }
}

fn check_resolution(res: usize) -> Result<()> {
    if (8..=MAX_RESOLUTION).contains(&res) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("resolution {res} outside 8..={MAX_RESOLUTION}")))
    }
}

/// Per-timestep schedule quantities, index `i` holding timestep `i + 1`.
#[derive(Debug, Clone, Serialize)]
pub struct ScheduleCurves {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// `sqrt(alpha_bar)`, the weight on the clean latent.
    pub signal: Vec<f64>,
    /// `sqrt(1 - alpha_bar)`, the weight on the noise.
    pub noise: Vec<f64>,
    /// `ln(alpha_bar / (1 - alpha_bar))`.
    pub log_snr: Vec<f64>,
}

pub fn schedule_curves(params: &ScheduleParams) -> Result<ScheduleCurves> {
    let schedule = params.build()?;
    let ab = schedule.alpha_bars();
    Ok(ScheduleCurves {
        steps: schedule.steps(),
        betas: schedule.betas().to_vec(),
        alpha_bars: ab.to_vec(),
        signal: ab.iter().map(|a| a.sqrt()).collect(),
        noise: ab.iter().map(|a| (1.0 - a).sqrt()).collect(),
        log_snr: ab.iter().map(|a| (a / (1.0 - a)).ln()).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseFrame {
    pub t: usize,
    pub alpha_bar: f64,
}

/// A toy frontal rendering followed by its forward-noised versions at each
/// timestep. One noise draw is shared by every panel.
pub fn noise_strip(
    subject_seed: u64,
    noise_seed: u64,
    res: usize,
    params: &ScheduleParams,
    timesteps: &[usize],
) -> Result<(Rgba, Vec<NoiseFrame>)> {
    check_resolution(res)?;
    let schedule = params.build()?;
    let frontal = egofront::toy::generate(1, 1, res, subject_seed).remove(0).frontal;
    let clean = LatentTensor::new(frontal.data().clone(), 1.0)?;
    let eps = LatentTensor::randn(clean.shape(), &mut ChaCha8Rng::seed_from_u64(noise_seed));
    let mut panels = vec![frontal.clone()];
    let mut frames = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let z = forward_noise(&clean, t, &eps, &schedule)?;
        panels.push(ImageTensor::clamped(z.into_data(), ValueRange::SIGNED));
        frames.push(NoiseFrame { t, alpha_bar: schedule.alpha_bar(t)? });
    }
    let refs: Vec<&ImageTensor> = panels.iter().collect();
    Ok((Rgba::from_image(&ImageTensor::side_by_side(&refs)?), frames))
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentInfo {
    /// Joint frontal/mask transform, `None` when the identity branch ran.
    pub frontal: Option<FrameTransform>,
    pub ego_rotation_deg: Option<f64>,
}

/// Frontal, mask, augmented frontal, augmented mask, the augmented mask
/// tinted over the augmented frontal, ego, augmented ego.
pub fn augment_grid(seed: u64, res: usize, q: f64, p: f64, ranges: &AugmentRanges) -> Result<(Rgba, AugmentInfo)> {
    check_resolution(res)?;
    for (name, v) in [("q", q), ("p", p)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("{name} = {v} is not a probability")));
        }
    }
    let sample = egofront::toy::generate(1, 1, res, seed).remove(0);
    let front = augment_frontal(&sample.frontal, &sample.mask, q, ranges, seed.wrapping_mul(2))?;
    let ego = augment_ego(&sample.egos[0], p, ranges, seed.wrapping_mul(2).wrapping_add(1));
    let (mask, aug_mask) = (sample.mask.to_image(), front.mask.to_image());
    let overlay = tint(&front.image, &front.mask);
    let grid = ImageTensor::side_by_side(&[
        &sample.frontal,
        &mask,
        &front.image,
        &aug_mask,
        &overlay,
        &sample.egos[0],
        &ego.image,
    ])?;
    let info = AugmentInfo { frontal: front.transform, ego_rotation_deg: ego.rotation_deg };
    Ok((Rgba::from_image(&grid), info))
}

/// Blends red into `image` wherever `mask` is foreground.
fn tint(image: &ImageTensor, mask: &PoseMask) -> ImageTensor {
    let mut data = image.to_range(ValueRange::SIGNED).into_data();
    for ((c, y, x), v) in data.indexed_iter_mut() {
        if mask.data()[[y, x]] > 0.5 {
            let red = if c == 0 { 1.0 } else { -1.0 };
            *v = 0.5 * (*v + red);
        }
    }
    ImageTensor::clamped(data, ValueRange::SIGNED)
}

#[derive(Debug, Clone, Serialize)]
pub struct RankSummary {
    #[serde(flatten)]
    pub aggregate: RankAggregate,
    pub total_points: u64,
    pub expected_total_points: u64,
    pub table: String,
}

/// Borda aggregation of ballot text, one `rater,best,...,worst` per line.
pub fn borda_from_text(text: &str) -> Result<RankSummary> {
    let aggregate = borda_aggregate(&parse_ballots(text)?)?;
    Ok(RankSummary {
        total_points: aggregate.total_points(),
        expected_total_points: aggregate.expected_total_points(),
        table: aggregate.to_table(),
        aggregate,
    })
}
