//! Colour-coded previews of disparity and error maps.

use std::path::Path;

use crate::data::io::write_rgb8;
use crate::Result;

/// Piecewise-linear "turbo"-like ramp for `t ∈ [0, 1]`.
pub fn colormap(t: f32) -> [u8; 3] {
    const STOPS: [[f32; 3]; 6] = [
        [0.19, 0.07, 0.23],
        [0.16, 0.47, 0.93],
        [0.10, 0.85, 0.63],
        [0.64, 0.99, 0.24],
        [0.98, 0.59, 0.13],
        [0.48, 0.02, 0.01],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f32;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f) * 255.0).round() as u8;
    }
    out
}

pub fn disparity_rgb(values: &[f32], max_disparity: f32) -> Vec<u8> {
    values.iter().flat_map(|&v| colormap(v / max_disparity.max(1e-6))).collect()
}

/// Error colour bands in pixels: blue for small errors through red for
/// large ones; invalid pixels are black.
pub fn error_rgb(pred: &[f32], gt: &[f32], valid: &[bool]) -> Vec<u8> {
    const BANDS: [(f32, [u8; 3]); 8] = [
        (0.5, [49, 54, 149]),
        (1.0, [69, 117, 180]),
        (2.0, [116, 173, 209]),
        (3.0, [171, 217, 233]),
        (6.0, [254, 224, 144]),
        (12.0, [253, 174, 97]),
        (24.0, [244, 109, 67]),
        (f32::INFINITY, [215, 48, 39]),
    ];
    pred.iter()
        .zip(gt)
        .zip(valid)
        .flat_map(|((&p, &g), &ok)| {
            if !ok {
                return [0, 0, 0];
            }
            let e = (p - g).abs();
            BANDS.iter().find(|(t, _)| e < *t).map(|b| b.1).unwrap_or([215, 48, 39])
        })
        .collect()
}

pub fn save_disparity_png(path: &Path, values: &[f32], height: usize, width: usize, max_disparity: f32) -> Result<()> {
    write_rgb8(path, height, width, disparity_rgb(values, max_disparity))
}

pub fn save_error_png(path: &Path, pred: &[f32], gt: &[f32], valid: &[bool], height: usize, width: usize) -> Result<()> {
    write_rgb8(path, height, width, error_rgb(pred, gt, valid))
}
