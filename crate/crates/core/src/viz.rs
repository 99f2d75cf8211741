//! Attention trace rendering: step-by-column matrices and image overlays.

use crate::corpus::{GrayImage, ImageLine};
use crate::decoder::AttentionTrace;
use crate::error::{Error, Result};
use crate::feature_extractor::STRIDE;

/// Overlay blend weight of the attention map.
pub const OVERLAY_ALPHA: f32 = 0.6;

/// A rendered matrix; `degenerate` is set when every value was equal and the
/// image is therefore all black.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: GrayImage,
    pub degenerate: bool,
}

/// One row per decoding step, one column per source column (grid rows
/// summed), min-max scaled so the smallest weight is black and the largest
/// white.
pub fn render_attention_matrix(trace: &AttentionTrace) -> Result<Rendered> {
    if trace.steps() == 0 || trace.grid_cols == 0 {
        return Err(Error::Data("empty attention trace".into()));
    }
    let values: Vec<f32> = (0..trace.steps()).flat_map(|t| trace.column_profile(t)).collect();
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = !(hi > lo);
    if degenerate {
        log::warn!("attention trace is constant; rendering all black");
    }
    let data = values.iter().map(|&v| if degenerate { 0.0 } else { (v - lo) / (hi - lo) }).collect();
    Ok(Rendered { image: GrayImage::new(trace.grid_cols, trace.steps(), data)?, degenerate })
}

/// Brightens `line` where step `step` attends: the weight grid is scaled by
/// its maximum, upsampled by the extractor stride and blended in as
/// `pixel·(1−α) + α·weight`.
pub fn overlay_attention(line: &ImageLine, trace: &AttentionTrace, step: usize) -> Result<GrayImage> {
    if step >= trace.steps() {
        return Err(Error::Data(format!("step {step} outside trace of {} steps", trace.steps())));
    }
    let img = &line.pixels;
    if trace.grid_rows * STRIDE != img.height || trace.grid_cols * STRIDE != img.width {
        return Err(Error::Data(format!(
            "trace grid {}×{} does not cover a {}×{} image",
            trace.grid_rows, trace.grid_cols, img.height, img.width
        )));
    }
    let row = &trace.rows[step];
    let peak = row.iter().copied().fold(0.0f32, f32::max);
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let w = row[(y / STRIDE) * trace.grid_cols + x / STRIDE];
            let w = if peak > 0.0 { (w / peak).clamp(0.0, 1.0) } else { 0.0 };
            let p = img.get(x, y);
            out.set(x, y, (p * (1.0 - OVERLAY_ALPHA) + OVERLAY_ALPHA * w).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Weighted mean source column of step `t`, using the grid-row-summed
/// profile. `None` when the profile has no positive mass.
pub fn attention_centroid(trace: &AttentionTrace, t: usize) -> Option<f64> {
    let profile = trace.column_profile(t);
    let mass: f64 = profile.iter().map(|&v| v as f64).sum();
    if !(mass > 0.0) {
        return None;
    }
    Some(profile.iter().enumerate().map(|(c, &v)| c as f64 * v as f64).sum::<f64>() / mass)
}
