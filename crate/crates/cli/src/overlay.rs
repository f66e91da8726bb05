//! PNG rendering of diagnostics: grayscale maps, mask overlays, class maps.

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};
use std::path::Path;

/// Fixed palette for class maps (background black, then saturated colors).
const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 60, 60],
    [60, 200, 60],
    [70, 90, 230],
    [230, 220, 60],
    [200, 60, 200],
    [60, 210, 210],
    [240, 240, 240],
];

pub fn class_color(class: u8) -> [u8; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale rendering of values scaled by `max_value`.
pub fn save_gray(values: &ArrayView2<f64>, max_value: f64, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), v) in values.indexed_iter() {
        let g = to_u8(v / max_value.max(1e-12));
        img.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Grayscale base image with mask-1 pixels painted pure red (255, 0, 0) so
/// densities can be recounted from the file.
pub fn save_mask_overlay(
    base: &ArrayView2<f64>,
    mask: &ArrayView2<u8>,
    path: &Path,
) -> Result<()> {
    let (h, w) = base.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), v) in base.indexed_iter() {
        // cap the base at 254 so (255, 0, 0) is unambiguous
        let g = to_u8(*v).min(254);
        let px = if mask[[y, x]] == 1 {
            Rgb([255, 0, 0])
        } else {
            Rgb([g, g, g])
        };
        img.put_pixel(x as u32, y as u32, px);
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Class-id map rendered with the fixed palette.
pub fn save_class_map(labels: &ArrayView2<u8>, path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &c) in labels.indexed_iter() {
        img.put_pixel(x as u32, y as u32, Rgb(class_color(c)));
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// f32 image channel as f64 2D view helper.
pub fn channel_as_f64(image: &ndarray::Array3<f32>, channel: usize) -> Array2<f64> {
    let (_c, h, w) = image.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = image[[channel, y, x]] as f64;
        }
    }
    out
}
