//! Dataset layout, loading, augmentation, and a synthetic scene generator.
//!
//! Canonical on-disk layout under a dataset root:
//!
//! ```text
//! root/
//!   manifest              key = value lines: height, width, sigma, train/val/test id lists
//!   images/<id>.png       8-bit RGB frames at native resolution
//!   fixations/<id>.txt    one "x y" pair per line, 0-based, native-resolution pixels
//! ```
//!
//! Public driving-gaze datasets ship in mutually incompatible formats;
//! converters into this layout are user-side scripts. The synthetic generator
//! produces desk-scale road scenes (sky gradient, road trapezoid converging
//! on a vanishing point, vehicle-like rectangles) with fixations biased
//! toward the vanishing point, bit-reproducible from a seed.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::saliency::{default_sigma, make_gt_default, FixationMap, GtWarning, SaliencyMap};
use crate::util::{bilinear_resize_array, derive_rng};

/// Dataset partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

/// One annotated frame. The ground-truth map is not stored; it is built on
/// demand from the fixations and the configured peak spread.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `(3, H, W)`, values in `[0, 1]`.
    pub image: Array3<f64>,
    pub fixations: FixationMap,
    /// Gaussian peak spread used for this sample's ground truth.
    pub sigma: f64,
}

impl Sample {
    /// `(height, width)` of the image.
    pub fn dims(&self) -> (usize, usize) {
        let sh = self.image.shape();
        (sh[1], sh[2])
    }

    /// Builds the ground-truth saliency map for this sample.
    pub fn gt(&self) -> Result<(SaliencyMap, Option<GtWarning>)> {
        make_gt_default(&self.fixations, self.sigma)
    }
}

/// Resolved view of a dataset: root, chosen split, effective resize target
/// and ground-truth spread.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    split: Split,
    sigma: f64,
    target: (usize, usize),
    train_ids: Vec<String>,
    val_ids: Vec<String>,
    test_ids: Vec<String>,
}

fn check_divisible_by_32(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Config(format!(
            "dataset resolution must be positive and divisible by 32, got {h}x{w}"
        )));
    }
    Ok(())
}

impl DatasetManifest {
    /// Reads `root/manifest` and selects a split.
    pub fn load(root: impl AsRef<Path>, split: Split) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("manifest");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Data(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        let mut height = None;
        let mut width = None;
        let mut sigma = None;
        let mut train_ids = Vec::new();
        let mut val_ids = Vec::new();
        let mut test_ids = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!(
                    "manifest line {} is not 'key = value': {line:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = |v: &str| {
                v.parse::<usize>().map_err(|_| {
                    Error::Data(format!("manifest key '{key}' has non-integer value {v:?}"))
                })
            };
            match key {
                "height" => height = Some(parse_usize(value)?),
                "width" => width = Some(parse_usize(value)?),
                "sigma" => {
                    sigma = Some(value.parse::<f64>().map_err(|_| {
                        Error::Data(format!("manifest sigma is not a number: {value:?}"))
                    })?)
                }
                "train" | "val" | "test" => {
                    let ids: Vec<String> =
                        value.split_whitespace().map(str::to_string).collect();
                    match key {
                        "train" => train_ids = ids,
                        "val" => val_ids = ids,
                        _ => test_ids = ids,
                    }
                }
                other => {
                    return Err(Error::Data(format!(
                        "manifest line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        let height = height.ok_or_else(|| Error::Data("manifest is missing 'height'".into()))?;
        let width = width.ok_or_else(|| Error::Data("manifest is missing 'width'".into()))?;
        check_divisible_by_32(height, width)?;
        let sigma = sigma.unwrap_or_else(|| default_sigma(height));
        if !(sigma > 0.0) {
            return Err(Error::Data(format!(
                "manifest sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            root,
            split,
            sigma,
            target: (height, width),
            train_ids,
            val_ids,
            test_ids,
        })
    }

    /// Overrides the resize target `(height, width)`.
    pub fn with_resize(mut self, h: usize, w: usize) -> Result<Self> {
        check_divisible_by_32(h, w)?;
        self.target = (h, w);
        Ok(self)
    }

    /// Overrides the ground-truth peak spread.
    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Effective `(height, width)` samples are resized to.
    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    /// Ids of the selected split, lexicographically sorted.
    pub fn ids(&self) -> Vec<String> {
        let mut ids = match self.split {
            Split::Train => self.train_ids.clone(),
            Split::Val => self.val_ids.clone(),
            Split::Test => self.test_ids.clone(),
        };
        ids.sort();
        ids
    }
}

/// Loaded split plus non-fatal conditions encountered while loading.
#[derive(Debug)]
pub struct LoadedSplit {
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
}

/// Proportional coordinate rescale with floor rounding; maps `[0, from)` into
/// `[0, to)` exactly.
pub fn rescale_coord(x: usize, from: usize, to: usize) -> usize {
    x * to / from
}

fn file_stems(dir: &Path, ext: &str) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|s| s.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

/// Decodes a PNG into a `(3, H, W)` array scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Encodes a `(3, H, W)` array in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_image(img: &Array3<f64>, path: &Path) -> Result<()> {
    let sh = img.shape();
    let (h, w) = (sh[1], sh[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Per-channel bilinear resize of a `(3, H, W)` image.
pub fn resize_image(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let mut out = Array3::zeros((3, out_h, out_w));
    for c in 0..3 {
        let ch = img.index_axis(Axis(0), c).to_owned();
        let r = bilinear_resize_array(&ch, out_h, out_w);
        out.index_axis_mut(Axis(0), c).assign(&r);
    }
    out
}

fn parse_fixation_file(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| {
                Error::Data(format!(
                    "{} line {}: expected 'x y' integers, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })
        };
        let x = parse(it.next())?;
        let y = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::Data(format!(
                "{} line {}: trailing tokens in {line:?}",
                path.display(),
                lineno + 1
            )));
        }
        out.push((x, y));
    }
    Ok(out)
}

/// Loads the manifest's split in deterministic id order, resizing images to
/// the target resolution and rescaling fixation coordinates proportionally.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<LoadedSplit> {
    let images_dir = manifest.root().join("images");
    let fix_dir = manifest.root().join("fixations");
    let image_ids = file_stems(&images_dir, "png")?;
    let fix_ids = file_stems(&fix_dir, "txt")?;

    let orphan_images: Vec<&String> = image_ids.difference(&fix_ids).collect();
    let orphan_fixations: Vec<&String> = fix_ids.difference(&image_ids).collect();
    if !orphan_images.is_empty() || !orphan_fixations.is_empty() {
        return Err(Error::Data(format!(
            "dataset validation failed: images without fixations: {orphan_images:?}; \
             fixations without images: {orphan_fixations:?}"
        )));
    }

    let ids = manifest.ids();
    let mut warnings = Vec::new();
    if ids.is_empty() {
        warnings.push(format!(
            "split '{}' in {} lists no samples",
            manifest.split(),
            manifest.root().display()
        ));
    }
    let missing: Vec<&String> = ids.iter().filter(|id| !image_ids.contains(*id)).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "split '{}' references samples not on disk: {missing:?}",
            manifest.split()
        )));
    }

    let (th, tw) = manifest.target();
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image = load_image(&images_dir.join(format!("{id}.png")))?;
        let (nh, nw) = (image.shape()[1], image.shape()[2]);
        let raw_fix = parse_fixation_file(&fix_dir.join(format!("{id}.txt")))?;
        for &(x, y) in &raw_fix {
            if x >= nw || y >= nh {
                return Err(Error::Data(format!(
                    "sample {id}: fixation ({x},{y}) outside native {nh}x{nw} image"
                )));
            }
        }
        let (image, fixations) = if (nh, nw) == (th, tw) {
            (image, raw_fix)
        } else {
            let resized = resize_image(&image, th, tw);
            let fixations = raw_fix
                .into_iter()
                .map(|(x, y)| (rescale_coord(x, nw, tw), rescale_coord(y, nh, th)))
                .collect();
            (resized, fixations)
        };
        let fixations = FixationMap::new(tw, th, fixations)?;
        if fixations.is_empty() {
            warnings.push(format!("sample {id} has no fixations"));
        }
        samples.push(Sample {
            id,
            image,
            fixations,
            sigma: manifest.sigma(),
        });
    }
    Ok(LoadedSplit { samples, warnings })
}

/// Horizontal mirror of a sample: image columns, fixation x coordinates and
/// (by construction of the lazy ground truth) the saliency map all flip
/// together.
pub fn flip_horizontal(s: &Sample) -> Result<Sample> {
    let (h, w) = s.dims();
    let mut image = Array3::zeros((3, h, w));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                image[[c, y, x]] = s.image[[c, y, w - 1 - x]];
            }
        }
    }
    let fixations: Vec<(usize, usize)> = s
        .fixations
        .fixations()
        .iter()
        .map(|&(x, y)| (w - 1 - x, y))
        .collect();
    Ok(Sample {
        id: s.id.clone(),
        image,
        fixations: FixationMap::new(w, h, fixations)?,
        sigma: s.sigma,
    })
}

/// Photometric jitter with explicit factors (1.0 each = identity):
/// brightness scales values, contrast stretches around the global gray mean,
/// saturation interpolates between per-pixel luma and color. Output clamped
/// to `[0, 1]`.
pub fn color_jitter(img: &Array3<f64>, brightness: f64, contrast: f64, saturation: f64) -> Array3<f64> {
    let sh = img.shape();
    let (h, w) = (sh[1], sh[2]);
    let mut out = img.mapv(|v| v * brightness);
    let mut gray_mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            gray_mean += 0.299 * out[[0, y, x]] + 0.587 * out[[1, y, x]] + 0.114 * out[[2, y, x]];
        }
    }
    gray_mean /= (h * w) as f64;
    out.mapv_inplace(|v| gray_mean + (v - gray_mean) * contrast);
    for y in 0..h {
        for x in 0..w {
            let luma = 0.299 * out[[0, y, x]] + 0.587 * out[[1, y, x]] + 0.114 * out[[2, y, x]];
            for c in 0..3 {
                let v = luma + (out[[c, y, x]] - luma) * saturation;
                out[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Training augmentation: coin-flip horizontal mirror plus color jitter with
/// factors drawn from `[1 - jitter, 1 + jitter]`. Always consumes the same
/// number of RNG draws regardless of the flip outcome.
pub fn augment(s: &Sample, rng: &mut impl Rng, jitter: f64) -> Result<Sample> {
    let do_flip = rng.random_bool(0.5);
    let lo = (1.0 - jitter).max(0.0);
    let hi = 1.0 + jitter;
    let b = rng.random_range(lo..=hi);
    let c = rng.random_range(lo..=hi);
    let sat = rng.random_range(lo..=hi);
    let s = if do_flip {
        flip_horizontal(s)?
    } else {
        s.clone()
    };
    Ok(Sample {
        image: color_jitter(&s.image, b, c, sat),
        ..s
    })
}

/// Planted vanishing point for a synthetic dataset seed (same for every
/// sample generated from that seed).
pub fn synth_vanishing_point(h: usize, w: usize, seed: u64) -> (usize, usize) {
    let mut rng = derive_rng(seed, 999);
    let jx = rng.random_range(-(w as i64 / 16)..=(w as i64 / 16));
    let jy = rng.random_range(-(h as i64 / 24)..=(h as i64 / 24));
    let x = (w as i64 / 2 + jx).clamp(1, w as i64 - 2) as usize;
    let y = (h as i64 / 3 + jy).clamp(1, h as i64 - 2) as usize;
    (x, y)
}

/// Generates one synthetic road scene and its fixations, reproducible from
/// `(seed, index)` independent of how many samples are generated.
pub fn synth_sample(h: usize, w: usize, seed: u64, index: usize) -> (Array3<f64>, Vec<(usize, usize)>) {
    let (vx, vy) = synth_vanishing_point(h, w, seed);
    let mut rng = derive_rng(seed, 1000 + index as u64);
    let mut img = Array3::zeros((3, h, w));

    // Sky gradient down to the horizon, ground below.
    for y in 0..h {
        let (r, g, b) = if y <= vy {
            let t = y as f64 / vy.max(1) as f64;
            (
                0.45 + 0.30 * t,
                0.55 + 0.23 * t,
                0.70 + 0.12 * t,
            )
        } else {
            let t = (y - vy) as f64 / (h - vy) as f64;
            (0.38 - 0.06 * t, 0.35 - 0.05 * t, 0.30 - 0.04 * t)
        };
        for x in 0..w {
            img[[0, y, x]] = r;
            img[[1, y, x]] = g;
            img[[2, y, x]] = b;
        }
    }

    // Road trapezoid converging on the vanishing point, with a dashed
    // center line.
    for y in vy..h {
        let t = (y - vy) as f64 / (h - vy).max(1) as f64;
        let half = t * 0.42 * w as f64;
        let x0 = (vx as f64 - half).max(0.0) as usize;
        let x1 = ((vx as f64 + half) as usize).min(w - 1);
        for x in x0..=x1 {
            img[[0, y, x]] = 0.42;
            img[[1, y, x]] = 0.42;
            img[[2, y, x]] = 0.44;
        }
        if (y / 3) % 2 == 0 && half >= 1.0 {
            let lw = (w / 64).max(1);
            for dx in 0..lw {
                let x = (vx + dx).min(w - 1);
                img[[0, y, x]] = 0.85;
                img[[1, y, x]] = 0.85;
                img[[2, y, x]] = 0.78;
            }
        }
    }

    // Vehicle-like rectangles on the road, nearer ones larger.
    let n_rects = rng.random_range(0..=4usize);
    let mut rect_centers = Vec::new();
    for _ in 0..n_rects {
        let y_base = rng.random_range(vy + 1..h);
        let t = (y_base - vy) as f64 / (h - vy).max(1) as f64;
        let rw = ((0.05 + 0.20 * t) * w as f64).max(2.0) as usize;
        let rh = ((0.04 + 0.14 * t) * h as f64).max(2.0) as usize;
        let off = rng.random_range(-0.3..0.3) * t * w as f64;
        let cx = (vx as f64 + off).clamp(0.0, (w - 1) as f64) as usize;
        let color = [
            rng.random_range(0.15..0.75),
            rng.random_range(0.15..0.75),
            rng.random_range(0.15..0.75),
        ];
        let x0 = cx.saturating_sub(rw / 2);
        let x1 = (cx + rw / 2).min(w - 1);
        let y0 = y_base.saturating_sub(rh);
        for y in y0..=y_base.min(h - 1) {
            for x in x0..=x1 {
                for c in 0..3 {
                    img[[c, y, x]] = color[c];
                }
            }
        }
        rect_centers.push((cx, (y0 + y_base.min(h - 1)) / 2));
    }

    // Sensor-like noise.
    for v in img.iter_mut() {
        *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
    }

    // Fixations: mostly near the vanishing point, sometimes on a vehicle.
    let n_fix = rng.random_range(1..=5usize);
    let mut fixations = Vec::with_capacity(n_fix);
    for _ in 0..n_fix {
        let on_vp = rect_centers.is_empty() || rng.random_bool(0.7);
        let (cx, cy, spread) = if on_vp {
            (vx as f64, vy as f64, 3.0)
        } else {
            let &(rx, ry) = rect_centers
                .get(rng.random_range(0..rect_centers.len()))
                .expect("nonempty");
            (rx as f64, ry as f64, 2.0)
        };
        let dx: f64 = crate::util::standard_normal_vec(&mut rng, 1)[0] * spread;
        let dy: f64 = crate::util::standard_normal_vec(&mut rng, 1)[0] * spread;
        let x = (cx + dx).round().clamp(0.0, (w - 1) as f64) as usize;
        let y = (cy + dy).round().clamp(0.0, (h - 1) as f64) as usize;
        fixations.push((x, y));
    }
    (img, fixations)
}

/// Writes `n` synthetic samples in the canonical layout. All three splits
/// list every sample: the generator exists for desk-scale overfitting and
/// inference smoke tests, not held-out evaluation.
pub fn synth_dataset(dir: impl AsRef<Path>, n: usize, h: usize, w: usize, seed: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    check_divisible_by_32(h, w)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("fixations"))?;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("id{i:04}");
        let (img, fixations) = synth_sample(h, w, seed, i);
        save_image(&img, &dir.join("images").join(format!("{id}.png")))?;
        let mut text = String::new();
        for (x, y) in fixations {
            text.push_str(&format!("{x} {y}\n"));
        }
        std::fs::write(dir.join("fixations").join(format!("{id}.txt")), text)?;
        ids.push(id);
    }
    let id_list = ids.join(" ");
    let manifest = format!(
        "# synthetic road-scene dataset\nheight = {h}\nwidth = {w}\nsigma = {}\n\
         train = {id_list}\nval = {id_list}\ntest = {id_list}\n",
        default_sigma(h)
    );
    std::fs::write(dir.join("manifest"), manifest)?;
    Ok(())
}
