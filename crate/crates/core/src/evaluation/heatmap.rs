//! Spectrogram heatmaps.
//!
//! Time runs left to right, one pixel column per frame; frequency runs bottom
//! to top, one pixel row per bin. Values are scaled linearly from the
//! spectrogram's own minimum (dark purple) to its maximum (pale yellow)
//! through a five-stop magma-like ramp. A constant spectrogram is drawn
//! entirely in the darkest color.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::features::Spectrogram;

const STOPS: [[f64; 3]; 5] = [
    [0.0, 0.0, 4.0],
    [81.0, 18.0, 124.0],
    [183.0, 55.0, 121.0],
    [252.0, 137.0, 97.0],
    [252.0, 253.0, 191.0],
];

/// Color of `u ∈ [0, 1]` (clamped).
pub fn colormap(u: f64) -> Rgb<u8> {
    let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, 1.0) };
    let pos = u * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

pub fn heatmap_image(s: &Spectrogram) -> Result<RgbImage> {
    if s.n_frames() == 0 || s.n_bins() == 0 {
        return Err(Error::Validation("cannot draw an empty spectrogram".into()));
    }
    if s.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("spectrogram contains non-finite values".into()));
    }
    let lo = s.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let (w, h) = (s.n_frames() as u32, s.n_bins() as u32);
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let v = s.values[[x as usize, (h - 1 - y) as usize]];
        colormap(if span > 0.0 { (v - lo) / span } else { 0.0 })
    }))
}

/// Writes a PNG heatmap.
pub fn render_heatmap(s: &Spectrogram, out_path: &Path) -> Result<()> {
    let img = heatmap_image(s)?;
    img.save_with_format(out_path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(out_path, io),
            other => Error::Format(other.to_string()),
        })
}
