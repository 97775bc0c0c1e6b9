//! WebAssembly exports for the browser demo in `www/`. Each export wraps a
//! function in [`ops`] and hands results to JavaScript as JSON or RGBA bytes.

pub mod ops;

use egofront::datapipe::AugmentRanges;
use egofront::ScheduleParams;
use wasm_bindgen::prelude::*;

fn js(e: egofront::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn json<T: serde::Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

/// An RGBA image with a JSON description of what it shows.
#[wasm_bindgen]
pub struct Preview {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    info: String,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn info(&self) -> String {
        self.info.clone()
    }
}

fn preview<T: serde::Serialize>(image: ops::Rgba, info: &T) -> Result<Preview, JsError> {
    Ok(Preview { width: image.width, height: image.height, rgba: image.data, info: json(info)? })
}

/// Beta, alpha-bar, signal/noise weights and log-SNR for a linear schedule.
#[wasm_bindgen]
pub fn schedule_curves(steps: usize, beta_start: f64, beta_end: f64) -> Result<String, JsError> {
    json(&ops::schedule_curves(&ScheduleParams { steps, beta_start, beta_end }).map_err(js)?)
}

/// A toy frontal image and its forward-noised versions at `timesteps`.
#[wasm_bindgen]
pub fn noise_preview(
    subject_seed: u32,
    noise_seed: u32,
    resolution: usize,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    timesteps: Vec<u32>,
) -> Result<Preview, JsError> {
    let params = ScheduleParams { steps, beta_start, beta_end };
    let ts: Vec<usize> = timesteps.into_iter().map(|t| t as usize).collect();
    let (image, frames) =
        ops::noise_strip(subject_seed.into(), noise_seed.into(), resolution, &params, &ts).map_err(js)?;
    preview(image, &frames)
}

/// One draw of the frontal (probability `q`) and ego (probability `p`)
/// augmentations on a toy subject.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn augment_preview(
    seed: u32,
    resolution: usize,
    q: f64,
    p: f64,
    zoom_max: f64,
    shift_max: f64,
    frontal_rotation_deg: f64,
    ego_rotation_deg: f64,
) -> Result<Preview, JsError> {
    let ranges = AugmentRanges { zoom_max, shift_max, frontal_rotation_deg, ego_rotation_deg };
    let (image, info) = ops::augment_grid(seed.into(), resolution, q, p, &ranges).map_err(js)?;
    preview(image, &info)
}

/// Borda scores and mean ranks from `rater,best,...,worst` lines.
#[wasm_bindgen]
pub fn borda_from_text(text: &str) -> Result<String, JsError> {
    json(&ops::borda_from_text(text).map_err(js)?)
}
