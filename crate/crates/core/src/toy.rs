//! Procedural stand-in for captured data: simple clothed figures rendered
//! from a head-mounted top-down viewpoint and as a frontal T-pose.
//!
//! Garment types change visible geometry (bare shins for shorts, bare
//! forearms for t-shirts) in both views, so the pairing carries the same
//! kind of signal the real task does, at a size a CPU can train on.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datapipe::{ClothingLabels, LowerGarment, UpperGarment};
use crate::error::Result;
use crate::quality::ClothingClassifier;
use crate::tensor::{ImageTensor, PoseMask, ValueRange};

type Rgb = [f64; 3];

const GARMENT_PALETTE: [Rgb; 6] = [
    [0.80, 0.15, 0.15],
    [0.15, 0.30, 0.75],
    [0.15, 0.60, 0.25],
    [0.90, 0.75, 0.10],
    [0.10, 0.10, 0.12],
    [0.95, 0.95, 0.95],
];
const SKIN_TONES: [Rgb; 3] = [[0.93, 0.76, 0.62], [0.76, 0.55, 0.40], [0.45, 0.30, 0.20]];
const SHOE: Rgb = [0.18, 0.16, 0.15];
const FRONTAL_BACKGROUND: Rgb = [0.62, 0.64, 0.66];
const FLOOR: Rgb = [0.42, 0.36, 0.30];

#[derive(Debug, Clone, PartialEq)]
pub struct ToySubject {
    pub id: String,
    pub clothing: ClothingLabels,
    pub upper_color: Rgb,
    pub lower_color: Rgb,
    pub skin: Rgb,
    /// Horizontal body-width scale.
    pub build: f64,
}

/// Per-frame body configuration seen by the head-mounted camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyPose {
    /// Arm angle away from the body, radians.
    pub arm_angle: f64,
    pub leg_spread: f64,
    /// Whole-frame offset, fraction of the frame.
    pub drift: (f64, f64),
    pub brightness: f64,
}

impl ToyPose {
    pub fn neutral() -> Self {
        Self { arm_angle: 0.25, leg_spread: 1.0, drift: (0.0, 0.0), brightness: 1.0 }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            arm_angle: rng.random_range(0.05..0.6),
            leg_spread: rng.random_range(0.8..1.3),
            drift: (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)),
            brightness: rng.random_range(0.92..1.08),
        }
    }

    /// Shoulders, hands, hips and feet in body coordinates, normalised by
    /// torso length.
    pub fn signature(&self) -> Vec<f64> {
        let torso = 0.42;
        let arm = 0.45;
        let (s, c) = self.arm_angle.sin_cos();
        let joints = [
            (-0.34, 0.05),
            (0.34, 0.05),
            (-0.34 - s * arm, 0.05 + c * arm),
            (0.34 + s * arm, 0.05 + c * arm),
            (-0.09 * self.leg_spread, torso),
            (0.09 * self.leg_spread, torso),
            (-0.13 * self.leg_spread, 0.88),
            (0.13 * self.leg_spread, 0.88),
        ];
        joints.iter().flat_map(|(x, y)| [x / torso, y / torso]).collect()
    }
}

fn in_circle(u: f64, v: f64, cu: f64, cv: f64, r: f64) -> bool {
    (u - cu).powi(2) + (v - cv).powi(2) <= r * r
}

/// Distance from `p` to the segment `a-b`, plus the position along it in `[0, 1]`.
fn segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + s * dx, a.1 + s * dy);
    (((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt(), s)
}

fn render<F>(res: usize, background: Rgb, shade: F) -> (Array3<f64>, Array2<f64>)
where
    F: Fn(f64, f64) -> Option<Rgb>,
{
    const SS: usize = 2;
    let mut img = Array3::zeros((3, res, res));
    let mut mask = Array2::zeros((res, res));
    for y in 0..res {
        for x in 0..res {
            let mut acc = [0.0; 3];
            let mut cover = 0.0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let u = (x as f64 + (sx as f64 + 0.5) / SS as f64) / res as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / SS as f64) / res as f64;
                    let color = match shade(u, v) {
                        Some(c) => {
                            cover += 1.0;
                            c
                        }
                        None => background,
                    };
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            let n = (SS * SS) as f64;
            for c in 0..3 {
                img[[c, y, x]] = acc[c] / n;
            }
            mask[[y, x]] = cover / n;
        }
    }
    (img, mask)
}

fn to_signed(img: Array3<f64>) -> ImageTensor {
    ImageTensor::clamped(img.mapv(|v| v * 2.0 - 1.0), ValueRange::SIGNED)
}

impl ToySubject {
    pub fn random<R: Rng + ?Sized>(id: impl Into<String>, rng: &mut R) -> Self {
        let upper = rng.random_range(0..GARMENT_PALETTE.len());
        let mut lower = rng.random_range(0..GARMENT_PALETTE.len() - 1);
        if lower >= upper {
            lower += 1;
        }
        Self {
            id: id.into(),
            clothing: ClothingLabels {
                lower: if rng.random_bool(0.5) { LowerGarment::Shorts } else { LowerGarment::Pants },
                upper: if rng.random_bool(0.5) { UpperGarment::Tshirt } else { UpperGarment::Sweater },
            },
            upper_color: GARMENT_PALETTE[upper],
            lower_color: GARMENT_PALETTE[lower],
            skin: SKIN_TONES[rng.random_range(0..SKIN_TONES.len())],
            build: rng.random_range(0.85..1.15),
        }
    }

    fn frontal_shade(&self, u: f64, v: f64) -> Option<Rgb> {
        let du = (u - 0.5).abs();
        let torso_half = 0.11 * self.build;
        let leg_half = 0.10 * self.build;
        if in_circle(u, v, 0.5, 0.14, 0.065) {
            return Some(self.skin);
        }
        if du <= 0.025 && (0.19..0.23).contains(&v) {
            return Some(self.skin);
        }
        if du <= torso_half && (0.22..0.55).contains(&v) {
            return Some(self.upper_color);
        }
        if (0.235..0.295).contains(&v) && du > torso_half && du <= 0.44 {
            let sleeve_end = match self.clothing.upper {
                UpperGarment::Tshirt => torso_half + 0.07,
                UpperGarment::Sweater => 0.41,
            };
            return Some(if du <= sleeve_end { self.upper_color } else { self.skin });
        }
        if du <= leg_half && (0.55..0.60).contains(&v) {
            return Some(self.lower_color);
        }
        if du >= 0.012 && du <= leg_half && (0.60..0.93).contains(&v) {
            if v >= 0.90 {
                return Some(SHOE);
            }
            let hem = match self.clothing.lower {
                LowerGarment::Shorts => 0.70,
                LowerGarment::Pants => 0.90,
            };
            return Some(if v < hem { self.lower_color } else { self.skin });
        }
        None
    }

    /// Frontal T-pose view and its silhouette mask.
    pub fn render_frontal(&self, res: usize) -> (ImageTensor, PoseMask) {
        let (img, mask) = render(res, FRONTAL_BACKGROUND, |u, v| self.frontal_shade(u, v));
        let mask = mask.mapv(|c| if c >= 0.5 { 1.0 } else { 0.0 });
        let mask = PoseMask::new(mask, format!("toy T-pose silhouette, build {:.3}", self.build))
            .expect("binary mask");
        (to_signed(img), mask)
    }

    fn ego_shade(&self, u: f64, v: f64, pose: &ToyPose) -> Option<Rgb> {
        let (u, v) = (u - pose.drift.0, v - pose.drift.1);
        let du = (u - 0.5).abs();
        let side = if u < 0.5 { -1.0 } else { 1.0 };
        // Feet first: they sit on top of the trouser ends.
        if in_circle(u, v, 0.5 + side * 0.14 * pose.leg_spread, 0.92, 0.05) {
            return Some(SHOE);
        }
        // Torso trapezoid, widest at the shoulders near the camera.
        if (0.0..0.42).contains(&v) && du <= 0.36 - (0.16 / 0.42) * v {
            return Some(self.upper_color);
        }
        let (s, c) = pose.arm_angle.sin_cos();
        let shoulder = (0.5 + side * 0.34, 0.05);
        let hand = (shoulder.0 + side * s * 0.45, shoulder.1 + c * 0.45);
        let (d, along) = segment((u, v), shoulder, hand);
        if d <= 0.045 {
            let sleeve = match self.clothing.upper {
                UpperGarment::Tshirt => 0.3,
                UpperGarment::Sweater => 0.9,
            };
            return Some(if along <= sleeve { self.upper_color } else { self.skin });
        }
        let hip = (0.5 + side * 0.09 * pose.leg_spread, 0.42);
        let ankle = (0.5 + side * 0.13 * pose.leg_spread, 0.88);
        let (d, along) = segment((u, v), hip, ankle);
        if d <= 0.085 - 0.04 * along {
            let hem = match self.clothing.lower {
                LowerGarment::Shorts => 0.3,
                LowerGarment::Pants => 1.0,
            };
            return Some(if along <= hem { self.lower_color } else { self.skin });
        }
        None
    }

    /// Top-down view from the head-mounted camera.
    pub fn render_ego(&self, res: usize, pose: &ToyPose) -> ImageTensor {
        let (mut img, _) = render(res, FLOOR, |u, v| self.ego_shade(u, v, pose));
        img.mapv_inplace(|v| (v * pose.brightness).clamp(0.0, 1.0));
        to_signed(img)
    }
}

/// One rendered subject: frontal target, mask and several ego frames.
#[derive(Debug, Clone)]
pub struct ToySample {
    pub subject: ToySubject,
    pub frontal: ImageTensor,
    pub mask: PoseMask,
    pub egos: Vec<ImageTensor>,
    pub poses: Vec<ToyPose>,
}

/// Renders `subjects` random subjects with `frames` ego frames each.
pub fn generate(subjects: usize, frames: usize, res: usize, seed: u64) -> Vec<ToySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..subjects)
        .map(|i| {
            let subject = ToySubject::random(format!("toy{seed}_{i:04}"), &mut rng);
            let (frontal, mask) = subject.render_frontal(res);
            let poses: Vec<ToyPose> = (0..frames).map(|_| ToyPose::random(&mut rng)).collect();
            let egos = poses.iter().map(|p| subject.render_ego(res, p)).collect();
            ToySample { subject, frontal, mask, egos, poses }
        })
        .collect()
}

/// Reads garment types off a frontal toy rendering by comparing the shin
/// with the thigh and the forearm with the torso.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyClothingClassifier;

fn mean_color(img: &ImageTensor, u: (f64, f64), v: (f64, f64)) -> Rgb {
    let (h, w) = img.resolution();
    let r = img.range();
    let mut acc = [0.0; 3];
    let mut n = 0.0f64;
    let (y0, y1) = ((v.0 * h as f64) as usize, ((v.1 * h as f64) as usize).max((v.0 * h as f64) as usize + 1));
    let (x0, x1) = ((u.0 * w as f64) as usize, ((u.1 * w as f64) as usize).max((u.0 * w as f64) as usize + 1));
    for y in y0..y1.min(h) {
        for x in x0..x1.min(w) {
            for c in 0..3 {
                acc[c] += r.to_unit(img.data()[[c.min(img.channels() - 1), y, x]]);
            }
            n += 1.0;
        }
    }
    acc.map(|a| a / n.max(1.0))
}

fn color_distance(a: Rgb, b: Rgb) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl ClothingClassifier for ToyClothingClassifier {
    fn classify(&self, image: &ImageTensor) -> Result<ClothingLabels> {
        let thigh = mean_color(image, (0.42, 0.47), (0.62, 0.68));
        let shin = mean_color(image, (0.42, 0.47), (0.76, 0.86));
        let torso = mean_color(image, (0.46, 0.54), (0.30, 0.45));
        let forearm = mean_color(image, (0.12, 0.20), (0.245, 0.285));
        let forearm_r = mean_color(image, (0.80, 0.88), (0.245, 0.285));
        let forearm = [0, 1, 2].map(|c| 0.5 * (forearm[c] + forearm_r[c]));
        Ok(ClothingLabels {
            lower: if color_distance(thigh, shin) < 0.2 { LowerGarment::Pants } else { LowerGarment::Shorts },
            upper: if color_distance(torso, forearm) < 0.2 { UpperGarment::Sweater } else { UpperGarment::Tshirt },
        })
    }
}
