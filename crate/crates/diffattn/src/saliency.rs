//! Fixation maps and Gaussian-blurred ground-truth saliency.
//!
//! Eye trackers record discrete fixation points; the training target is a
//! dense probability-like map produced by convolving the binary fixation grid
//! with a truncated Gaussian (zero padding at borders) and min-max
//! normalizing. Peak spread models foveal/peripheral acuity falloff.
//!
//! Degenerate inputs never panic: an empty fixation list yields an all-zero
//! map plus a warning the caller may use to skip the sample, and flat nonzero
//! maps normalize to zero with a warning instead of dividing by zero.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Non-fatal conditions produced while building ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtWarning {
    /// No fixations: the ground-truth map is all zero.
    EmptyFixations,
    /// All values equal before normalization; normalized output is all zero.
    FlatMap,
}

/// Validated set of integer gaze points on an `H x W` grid, `(x, y)` order
/// with `x` along the width axis.
#[derive(Debug, Clone)]
pub struct FixationMap {
    width: usize,
    height: usize,
    fixations: Vec<(usize, usize)>,
}

impl FixationMap {
    /// Builds a fixation map; rejects out-of-bounds points, drops duplicates
    /// (keeping first occurrence) so the grid and list stay consistent.
    pub fn new(width: usize, height: usize, fixations: Vec<(usize, usize)>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "fixation map needs positive dimensions, got {width}x{height}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut kept = Vec::with_capacity(fixations.len());
        for (x, y) in fixations {
            if x >= width || y >= height {
                return Err(Error::Data(format!(
                    "fixation ({x},{y}) outside {width}x{height} grid"
                )));
            }
            if seen.insert((x, y)) {
                kept.push((x, y));
            }
        }
        Ok(Self {
            width,
            height,
            fixations: kept,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn fixations(&self) -> &[(usize, usize)] {
        &self.fixations
    }

    pub fn is_empty(&self) -> bool {
        self.fixations.is_empty()
    }

    /// Binary grid with 1 at every fixation, row-major `(h, w)`.
    pub fn grid(&self) -> Array2<f64> {
        let mut g = Array2::zeros((self.height, self.width));
        for &(x, y) in &self.fixations {
            g[[y, x]] = 1.0;
        }
        g
    }
}

/// Dense nonnegative attention map; `normalized` means min 0 / max 1 unless
/// the map is all zero.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    grid: Array2<f64>,
    normalized: bool,
}

impl SaliencyMap {
    /// Wraps an unnormalized grid; all values must be finite and nonnegative.
    pub fn from_grid(grid: Array2<f64>) -> Result<Self> {
        for v in grid.iter() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::Numeric(format!(
                    "saliency values must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(Self {
            grid,
            normalized: false,
        })
    }

    /// Wraps a grid already scaled to min 0 / max 1 (or all zero).
    pub fn from_normalized_grid(grid: Array2<f64>) -> Result<Self> {
        let m = Self::from_grid(grid)?;
        let max = m.grid.iter().copied().fold(0.0, f64::max);
        if max > 1.0 + 1e-9 {
            return Err(Error::Numeric(format!(
                "normalized saliency must not exceed 1, got max {max}"
            )));
        }
        Ok(Self {
            normalized: true,
            ..m
        })
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn into_grid(self) -> Array2<f64> {
        self.grid
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Min-max normalization. Flat inputs become all zero with a warning
    /// ([`GtWarning::FlatMap`] when nonzero, [`GtWarning::EmptyFixations`]
    /// when the input is already all zero).
    pub fn min_max_normalize(self) -> (Self, Option<GtWarning>) {
        let min = self.grid.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            let grid = self.grid.mapv(|v| (v - min) / (max - min));
            (
                Self {
                    grid,
                    normalized: true,
                },
                None,
            )
        } else {
            let warning = if max == 0.0 {
                GtWarning::EmptyFixations
            } else {
                GtWarning::FlatMap
            };
            (
                Self {
                    grid: Array2::zeros(self.grid.dim()),
                    normalized: true,
                },
                Some(warning),
            )
        }
    }
}

/// Truncated 2-D Gaussian on the integer lattice `[-r, r]^2`.
#[derive(Debug, Clone)]
pub struct GaussianKernel {
    sigma_x: f64,
    sigma_y: f64,
    radius: usize,
    weights: Array2<f64>,
}

impl GaussianKernel {
    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// `(2r+1) x (2r+1)` weights, row index = y offset + r.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Weight at integer offset `(dx, dy)`; zero outside the support.
    pub fn weight(&self, dx: i64, dy: i64) -> f64 {
        let r = self.radius as i64;
        if dx.abs() > r || dy.abs() > r {
            0.0
        } else {
            self.weights[[(dy + r) as usize, (dx + r) as usize]]
        }
    }
}

/// Evaluates the normalized Gaussian density
/// `1/(2 pi sx sy) * exp(-(x^2/sx^2 + y^2/sy^2)/2)` on the truncated lattice.
pub fn gaussian_kernel(sigma_x: f64, sigma_y: f64, radius: usize) -> Result<GaussianKernel> {
    if !(sigma_x > 0.0) || !(sigma_y > 0.0) {
        return Err(Error::Config(format!(
            "kernel standard deviations must be positive, got ({sigma_x}, {sigma_y})"
        )));
    }
    if radius == 0 {
        return Err(Error::Config("kernel radius must be at least 1".into()));
    }
    let n = 2 * radius + 1;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma_x * sigma_y);
    let mut weights = Array2::zeros((n, n));
    for iy in 0..n {
        let dy = iy as f64 - radius as f64;
        for ix in 0..n {
            let dx = ix as f64 - radius as f64;
            let q = dx * dx / (sigma_x * sigma_x) + dy * dy / (sigma_y * sigma_y);
            weights[[iy, ix]] = norm * (-0.5 * q).exp();
        }
    }
    Ok(GaussianKernel {
        sigma_x,
        sigma_y,
        radius,
        weights,
    })
}

/// Default truncation radius: `ceil(3 sigma)`, at least 1.
pub fn default_radius(sigma: f64) -> usize {
    (sigma * 3.0).ceil().max(1.0) as usize
}

/// Default peak spread for an input of height `h` pixels.
pub fn default_sigma(h: usize) -> f64 {
    h as f64 / 24.0
}

/// Raw (unnormalized) Gaussian blur of the fixation grid: each fixation
/// stamps the kernel, which equals zero-padded convolution of the binary map.
pub fn blur_fixations(fix: &FixationMap, kernel: &GaussianKernel) -> Array2<f64> {
    let (h, w) = (fix.height() as i64, fix.width() as i64);
    let r = kernel.radius() as i64;
    let mut acc = Array2::zeros((fix.height(), fix.width()));
    for &(x0, y0) in fix.fixations() {
        let (x0, y0) = (x0 as i64, y0 as i64);
        for dy in -r..=r {
            let y = y0 + dy;
            if y < 0 || y >= h {
                continue;
            }
            for dx in -r..=r {
                let x = x0 + dx;
                if x < 0 || x >= w {
                    continue;
                }
                acc[[y as usize, x as usize]] += kernel.weight(dx, dy);
            }
        }
    }
    acc
}

/// Ground-truth map: isotropic Gaussian blur of the fixations, truncated at
/// `radius`, then min-max normalized.
pub fn make_gt(
    fix: &FixationMap,
    sigma: f64,
    radius: usize,
) -> Result<(SaliencyMap, Option<GtWarning>)> {
    let kernel = gaussian_kernel(sigma, sigma, radius)?;
    make_gt_with_kernel(fix, &kernel)
}

/// [`make_gt`] with the default `ceil(3 sigma)` truncation radius.
pub fn make_gt_default(fix: &FixationMap, sigma: f64) -> Result<(SaliencyMap, Option<GtWarning>)> {
    make_gt(fix, sigma, default_radius(sigma))
}

/// Ground truth under an explicit (possibly anisotropic) kernel.
pub fn make_gt_with_kernel(
    fix: &FixationMap,
    kernel: &GaussianKernel,
) -> Result<(SaliencyMap, Option<GtWarning>)> {
    if fix.is_empty() {
        let zero = Array2::zeros((fix.height(), fix.width()));
        return Ok((
            SaliencyMap::from_normalized_grid(zero)?,
            Some(GtWarning::EmptyFixations),
        ));
    }
    let acc = blur_fixations(fix, kernel);
    let (map, warning) = SaliencyMap::from_grid(acc)?.min_max_normalize();
    Ok((map, warning))
}

/// Area-average pooling by a power-of-two factor, then re-normalization;
/// produces coarse-scale training targets.
pub fn downsample_gt(
    map: &SaliencyMap,
    factor: usize,
) -> Result<(SaliencyMap, Option<GtWarning>)> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Config(format!(
            "downsample factor must be a power of two, got {factor}"
        )));
    }
    let (h, w) = map.dims();
    if factor == 1 {
        return Ok((map.clone(), None));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "dimensions {h}x{w} not divisible by downsample factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::zeros((oh, ow));
    let area = (factor * factor) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut s = 0.0;
            for iy in 0..factor {
                for ix in 0..factor {
                    s += map.grid()[[oy * factor + iy, ox * factor + ix]];
                }
            }
            out[[oy, ox]] = s / area;
        }
    }
    let (m, warning) = SaliencyMap::from_grid(out)?.min_max_normalize();
    Ok((m, warning))
}
