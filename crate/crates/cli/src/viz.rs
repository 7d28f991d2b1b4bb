//! PNG renderings of action maps and instance labels.

use std::path::Path;

use anyhow::{Context, Result};
use image::{ImageBuffer, Luma, Rgb};
use recolor_core::grid::{ActionMap, LabelMap};

/// Fixed 256-entry palette: index 0 is black, the rest walk the hue circle
/// by the golden angle at alternating brightness.
pub fn palette() -> [[u8; 3]; 256] {
    let mut out = [[0u8; 3]; 256];
    for (i, slot) in out.iter_mut().enumerate().skip(1) {
        let hue = (i as f64 * 137.507_764) % 360.0;
        let value = if i % 2 == 0 { 0.95 } else { 0.75 };
        *slot = hsv_to_rgb(hue, 0.8, value);
    }
    out
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let q = |t: f64| ((t + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Action bits as black/white 8-bit grayscale.
pub fn write_action_png(path: &Path, action: &ActionMap) -> Result<()> {
    let (h, w) = action.dims();
    let raw = action.bits().iter().map(|&b| b * 255).collect();
    ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, raw)
        .context("action buffer")?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Labels colored by `palette()[label % 256]`.
pub fn write_label_visual(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dims();
    let pal = palette();
    let raw = labels
        .labels()
        .iter()
        .flat_map(|&l| pal[usize::from(l) % 256])
        .collect();
    ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(w as u32, h as u32, raw)
        .context("visual buffer")?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}
