//! Shared numeric helpers: seeded RNG streams, tensor/array conversion,
//! bilinear resizing, and parameter checksums.
//!
//! All stochastic tensors in the crate are drawn on the host from ChaCha
//! streams and uploaded with [`Tensor::from_vec`]; the backend device RNG is
//! never used, which keeps every run reproducible bit-for-bit.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SplitMix64 finalizer; decorrelates nearby seeds before keying ChaCha.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic RNG for a named stream of an experiment seed.
///
/// Streams are derived statelessly, so e.g. the noise used at training step
/// `k` does not depend on how many steps ran before a resume.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// `n` standard-normal draws as `f64`.
pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Standard-normal tensor of the given shape, drawn host-side.
pub fn standard_normal_tensor(
    rng: &mut impl Rng,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v = standard_normal_vec(rng, n);
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Uploads a 2-D `f64` array as a rank-2 tensor.
pub fn tensor_from_array2(a: &Array2<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = a.dim();
    let v: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, (h, w), device)?.to_dtype(dtype)?)
}

/// Downloads a tensor as a 2-D `f64` array; accepts rank 2, or ranks 3-4 with
/// leading singleton dimensions.
pub fn array2_from_tensor(t: &Tensor) -> Result<Array2<f64>> {
    let mut t = t.clone();
    while t.rank() > 2 {
        let d0 = t.dims()[0];
        if d0 != 1 {
            return Err(Error::Shape(format!(
                "expected leading singleton dimensions, got shape {:?}",
                t.shape()
            )));
        }
        t = t.squeeze(0)?;
    }
    if t.rank() != 2 {
        return Err(Error::Shape(format!(
            "expected a rank-2 tensor, got shape {:?}",
            t.shape()
        )));
    }
    let (h, w) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("shape matches element count"))
}

/// Flattens any tensor to a host `Vec<f64>`.
pub fn tensor_to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Largest absolute elementwise difference between two same-shaped tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let av = tensor_to_f64_vec(a)?;
    let bv = tensor_to_f64_vec(b)?;
    if av.len() != bv.len() {
        return Err(Error::Shape(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(av
        .iter()
        .zip(&bv)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Row-major `(out_n, in_n)` bilinear interpolation weights with the
/// half-pixel (align_corners = false) convention. Each row sums to 1.
pub fn bilinear_weights(in_n: usize, out_n: usize) -> Vec<f64> {
    assert!(in_n > 0 && out_n > 0);
    let mut w = vec![0.0; out_n * in_n];
    let scale = in_n as f64 / out_n as f64;
    for o in 0..out_n {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let i0 = src.floor();
        let frac = src - i0;
        let lo = (i0.max(0.0) as usize).min(in_n - 1);
        let hi = ((i0 + 1.0).max(0.0) as usize).min(in_n - 1);
        w[o * in_n + lo] += 1.0 - frac;
        w[o * in_n + hi] += frac;
    }
    w
}

/// Bilinear resize of an NCHW tensor, differentiable (implemented as two
/// matrix products against fixed interpolation weights).
pub fn bilinear_resize_tensor(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = t.dims4().map_err(|_| {
        Error::Shape(format!(
            "bilinear_resize_tensor expects NCHW, got shape {:?}",
            t.shape()
        ))
    })?;
    if h == out_h && w == out_w {
        return Ok(t.clone());
    }
    let dev = t.device();
    let dtype = t.dtype();
    let left = Tensor::from_vec(bilinear_weights(h, out_h), (1, out_h, h), dev)?.to_dtype(dtype)?;
    // Right factor is the transpose of the width weight matrix.
    let right = Tensor::from_vec(bilinear_weights(w, out_w), (1, out_w, w), dev)?
        .to_dtype(dtype)?
        .transpose(1, 2)?;
    let x = t.reshape((b * c, h, w))?;
    let y = left.broadcast_matmul(&x)?; // (b*c, out_h, w)
    let y = y.broadcast_matmul(&right)?; // (b*c, out_h, out_w)
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Bilinear resize of a 2-D array; same convention as the tensor variant.
pub fn bilinear_resize_array(a: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    if h == out_h && w == out_w {
        return a.clone();
    }
    let wh = bilinear_weights(h, out_h);
    let ww = bilinear_weights(w, out_w);
    // rows first: (out_h, w)
    let mut rows = Array2::<f64>::zeros((out_h, w));
    for o in 0..out_h {
        for i in 0..h {
            let wt = wh[o * h + i];
            if wt != 0.0 {
                for j in 0..w {
                    rows[[o, j]] += wt * a[[i, j]];
                }
            }
        }
    }
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for o in 0..out_w {
        for j in 0..w {
            let wt = ww[o * w + j];
            if wt != 0.0 {
                for r in 0..out_h {
                    out[[r, o]] += wt * rows[[r, j]];
                }
            }
        }
    }
    out
}

/// SHA-256 over `(name, values)` pairs in name order; stable fingerprint of a
/// parameter set regardless of iteration order.
pub fn param_checksum(params: &[(String, Tensor)]) -> Result<String> {
    let mut sorted: Vec<&(String, Tensor)> = params.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    for (name, t) in sorted {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for v in tensor_to_f64_vec(t)? {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Per-element schedule coefficients as a `(B,1,1,1)` tensor for broadcasting
/// over NCHW latents.
pub fn per_sample_coef(
    values: &[f64],
    taus: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut v = Vec::with_capacity(taus.len());
    for &tau in taus {
        let c = values.get(tau).ok_or_else(|| {
            Error::Step(format!(
                "step index {tau} outside schedule of length {}",
                values.len()
            ))
        })?;
        v.push(*c);
    }
    let b = v.len();
    Ok(Tensor::from_vec(v, (b, 1, 1, 1), device)?.to_dtype(dtype)?)
}
