//! Visualization output: 16-bit grayscale saliency PNGs (full metric
//! precision survives the file format), heat overlays on the source frame,
//! and horizontal strips showing a denoising trajectory.

use std::path::Path;

use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array3};

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Extracts a `(1,1,H,W)` tensor into a host grid.
pub fn tensor_map(t: &Tensor) -> Result<Array2<f64>> {
    let (b, c, h, w) = t.dims4().map_err(|_| {
        Error::Shape(format!("expected a (1,1,H,W) map, got {:?}", t.shape()))
    })?;
    if b != 1 || c != 1 {
        return Err(Error::Shape(format!(
            "expected a single-sample single-channel map, got {:?}",
            t.shape()
        )));
    }
    let vals = crate::util::tensor_to_f64_vec(t)?;
    Array2::from_shape_vec((h, w), vals)
        .map_err(|e| Error::Shape(format!("map reshape: {e}")))
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Renders a `[0,1]` grid as a 16-bit grayscale image buffer.
pub fn map_to_gray16(map: &Array2<f64>) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
    let (h, w) = map.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot render an empty map".into()));
    }
    let mut img = ImageBuffer::new(w as u32, h as u32);
    for (y, row) in map.outer_iter().enumerate() {
        for (x, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite saliency value {v} at ({y},{x})"
                )));
            }
            img.put_pixel(x as u32, y as u32, Luma([quantize16(v)]));
        }
    }
    Ok(img)
}

/// Writes a `[0,1]` grid as a 16-bit grayscale PNG.
pub fn save_gray16(map: &Array2<f64>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    map_to_gray16(map)?
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!(
            "writing {}: {e}",
            path.display()
        ))))
}

/// Reads a 16-bit grayscale PNG back into a `[0,1]` grid.
pub fn load_gray16(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| {
            Error::Io(std::io::Error::other(format!(
                "reading {}: {e}",
                path.display()
            )))
        })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array2::zeros((h, w));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f64 / 65535.0;
    }
    Ok(out)
}

/// Blue-to-red heat ramp for a `[0,1]` value.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let band = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [band(3.0), band(2.0), band(1.0)]
}

/// Blends a heat-colored saliency map over an RGB frame. The per-pixel blend
/// strength is `alpha * saliency`, so empty regions keep the original pixels.
pub fn overlay_heat(image: &Array3<f64>, map: &Array2<f64>, alpha: f64) -> Result<Array3<f64>> {
    let sh = image.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    if c != 3 {
        return Err(Error::Shape(format!("overlay needs an RGB frame, got {c} channels")));
    }
    if map.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "saliency {:?} does not match frame {h}x{w}",
            map.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0,1], got {alpha}")));
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let v = map[[y, x]].clamp(0.0, 1.0);
            let a = alpha * v;
            let heat = heat_color(v);
            for ch in 0..3 {
                out[[ch, y, x]] =
                    (image[[ch, y, x]] * (1.0 - a) + heat[ch] * a).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Concatenates equally sized frames into one horizontal strip
/// (height `H`, width `count * W`).
pub fn denoise_strip(frames: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Contract("a strip needs at least one frame".into()))?;
    let (h, w) = first.dim();
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "frame {i} is {:?}, expected {h}x{w}",
                f.dim()
            )));
        }
    }
    let mut out = Array2::zeros((h, w * frames.len()));
    for (i, f) in frames.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[[y, i * w + x]] = f[[y, x]];
            }
        }
    }
    Ok(out)
}
