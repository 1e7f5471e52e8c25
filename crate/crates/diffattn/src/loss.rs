//! Composite training objective: per-scale BCE + KL-divergence on the
//! upsampled saliency estimates plus a mean-squared noise-matching term,
//! averaged over the four scales with configurable weights.
//!
//! Map losses compare against ground truth at input resolution, so coarse
//! predictions are bilinearly upsampled (differentiably, via fixed
//! interpolation matrices) before the pixel terms are computed. KLD follows
//! the saliency-benchmark convention: ground truth against prediction over
//! sum-normalized maps, summed over pixels and averaged over the batch.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::util::bilinear_resize_tensor;

/// Numerical floor used by the pixel losses (probability clamping and
/// normalization smoothing).
pub const LOSS_EPS: f64 = 1e-7;

/// Number of prediction scales entering the composite loss.
pub const NUM_SCALES: usize = 4;

/// Weights of the three loss terms. `lambda1` scales BCE, `lambda2` KLD,
/// `lambda3` the noise-matching term.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    /// All weights must be nonnegative and at least one positive.
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 && self.lambda3 == 0.0 {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Reference setting: BCE and KLD at full weight, noise term at 0.001.
    pub fn standard() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.001,
        }
    }

    /// Published per-dataset KLD weights; `None` for unknown names.
    pub fn for_dataset(name: &str) -> Option<Self> {
        let lambda2 = match name.to_ascii_lowercase().as_str() {
            "trafficgaze" => 1.0,
            "dada2000" | "dada-2000" => 0.2,
            "bdda" | "bdd-a" => 0.1,
            "drfixd-rainy" | "drfixdrainy" => 1.0,
            _ => return None,
        };
        Some(Self {
            lambda1: 1.0,
            lambda2,
            lambda3: 0.001,
        })
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean binary cross entropy with soft targets; predictions are clamped to
/// `[eps, 1-eps]` so the result is finite for any input in `[0, 1]`.
pub fn bce_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, gt, "bce_loss")?;
    let p = pred.clamp(LOSS_EPS, 1.0 - LOSS_EPS)?;
    let one_minus_p = (1.0 - &p)?;
    let one_minus_g = (1.0 - gt)?;
    let ll = ((gt * p.log()?)? + (one_minus_g * one_minus_p.log()?)?)?;
    Ok(ll.mean_all()?.neg()?)
}

/// KL divergence of ground truth against prediction over sum-normalized
/// maps: `sum g * log(g / (p + eps) + eps)`, summed per sample and averaged
/// over the batch. Errors on an all-zero ground-truth sample, which has no
/// target distribution.
pub fn kld_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, gt, "kld_loss")?;
    let dims = pred.dims();
    if dims.is_empty() {
        return Err(Error::Shape("kld_loss: scalar input".into()));
    }
    let b = dims[0];
    let n: usize = dims[1..].iter().product();
    let p = pred.reshape((b, n))?;
    let g = gt.reshape((b, n))?;

    let g_sums = g.sum_keepdim(1)?;
    for (i, s) in g_sums.flatten_all()?.to_vec1::<f64>().or_else(|_| {
        g_sums
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()
    })?
    .iter()
    .enumerate()
    {
        if *s <= 0.0 {
            return Err(Error::Data(format!(
                "kld_loss: ground-truth sample {i} sums to {s}; no target distribution"
            )));
        }
    }

    let p = p.broadcast_div(&(p.sum_keepdim(1)? + LOSS_EPS)?)?;
    let g = g.broadcast_div(&(g_sums + LOSS_EPS)?)?;
    let ratio = ((&g / (&p + LOSS_EPS)?)? + LOSS_EPS)?;
    let per_sample = (ratio.log()? * g)?.sum(1)?;
    Ok(per_sample.mean_all()?)
}

/// Mean squared error between sampled and predicted noise.
pub fn dd_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    check_same_shape(eps, eps_hat, "dd_loss")?;
    Ok((eps - eps_hat)?.sqr()?.mean_all()?)
}

/// The three loss terms of one scale, kept on the graph as scalar tensors.
#[derive(Debug, Clone)]
pub struct ScaleTerms {
    pub bce: Tensor,
    pub kld: Tensor,
    pub dd: Tensor,
}

/// Builds one scale's terms: the scale prediction is bilinearly upsampled to
/// the ground-truth resolution for the pixel losses; the noise pair stays at
/// scale resolution.
pub fn scale_terms(
    pred: &Tensor,
    gt: &Tensor,
    eps: &Tensor,
    eps_hat: &Tensor,
) -> Result<ScaleTerms> {
    let (_, _, h, w) = gt.dims4().map_err(|_| {
        Error::Shape(format!("scale_terms: ground truth must be NCHW, got {:?}", gt.shape()))
    })?;
    let up = bilinear_resize_tensor(pred, h, w)?;
    Ok(ScaleTerms {
        bce: bce_loss(&up, gt)?,
        kld: kld_loss(&up, gt)?,
        dd: dd_loss(eps, eps_hat)?,
    })
}

/// Weighted composite over all scales:
/// `(1/|S|) * sum_s [l1*BCE_s + l2*KLD_s + l3*DD_s]`.
pub fn total_loss(terms: &[ScaleTerms], w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    if terms.len() != NUM_SCALES {
        return Err(Error::Contract(format!(
            "total_loss expects {NUM_SCALES} scales, got {}",
            terms.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for t in terms {
        let s = ((t.bce.affine(w.lambda1, 0.0)? + t.kld.affine(w.lambda2, 0.0)?)?
            + t.dd.affine(w.lambda3, 0.0)?)?;
        acc = Some(match acc {
            Some(a) => (a + s)?,
            None => s,
        });
    }
    Ok(acc
        .expect("NUM_SCALES > 0")
        .affine(1.0 / NUM_SCALES as f64, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;

    use crate::util::{derive_rng, standard_normal_vec};
    use rand::Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn t4(vals: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(vals.to_vec(), (1, 1, h, w), &dev()).unwrap()
    }

    fn uniform_vals(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        let mut rng = derive_rng(seed, 0x6c6f_7373);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let p = t4(&[0.5; 16], 4, 4);
        let g = t4(&[0.5; 16], 4, 4);
        let got = scalar(&bce_loss(&p, &g).unwrap());
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12, "{got}");
    }

    #[test]
    fn bce_vanishes_as_prediction_approaches_binary_target() {
        let g: Vec<f64> = (0..16).map(|i| f64::from(i % 2 == 0)).collect();
        let mut last = f64::INFINITY;
        for d in [1e-2, 1e-4, 1e-6] {
            let p: Vec<f64> = g.iter().map(|&v| v * (1.0 - 2.0 * d) + d).collect();
            let loss = scalar(&bce_loss(&t4(&p, 4, 4), &t4(&g, 4, 4)).unwrap());
            assert!(loss < last, "loss {loss} not below {last} at d={d}");
            last = loss;
        }
        assert!(last < 1e-4, "{last}");
    }

    #[test]
    fn bce_matches_hand_summed_formula() {
        let p = uniform_vals(1, 16, 0.05, 0.95);
        let g = uniform_vals(2, 16, 0.0, 1.0);
        let got = scalar(&bce_loss(&t4(&p, 4, 4), &t4(&g, 4, 4)).unwrap());
        let want = -p
            .iter()
            .zip(&g)
            .map(|(&pi, &gi)| {
                let pc = pi.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
                gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln()
            })
            .sum::<f64>()
            / 16.0;
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn bce_rejects_shape_mismatch() {
        let p = t4(&[0.5; 16], 4, 4);
        let g = t4(&[0.5; 4], 2, 2);
        assert_eq!(bce_loss(&p, &g).unwrap_err().category(), "shape");
    }

    #[test]
    fn kld_of_identical_maps_is_tiny() {
        // The epsilon smoothing inside the log makes the self-divergence a
        // hair below zero (about -n*eps), never positive.
        let v = uniform_vals(3, 64, 0.1, 1.0);
        let t = t4(&v, 8, 8);
        let got = scalar(&kld_loss(&t, &t).unwrap());
        assert!(got <= 1e-6, "{got}");
        assert!(got.abs() < 1e-4, "{got}");
    }

    #[test]
    fn kld_grows_as_prediction_mass_leaves_the_target_pixel() {
        let mut g = vec![0.0; 16];
        g[5] = 1.0;
        let spread = |peak: f64| {
            let mut p = vec![(1.0 - peak) / 15.0; 16];
            p[5] = peak;
            scalar(&kld_loss(&t4(&p, 4, 4), &t4(&g, 4, 4)).unwrap())
        };
        let small = spread(1e-4);
        let smaller = spread(1e-6);
        assert!(small > 1.0, "{small}");
        assert!(smaller > small, "{smaller} vs {small}");
    }

    #[test]
    fn kld_matches_double_precision_loop() {
        let p = uniform_vals(4, 64, 0.0, 1.0);
        let g = uniform_vals(5, 64, 0.0, 1.0);
        let got = scalar(&kld_loss(&t4(&p, 8, 8), &t4(&g, 8, 8)).unwrap());
        let ps: f64 = p.iter().sum();
        let gs: f64 = g.iter().sum();
        let want: f64 = p
            .iter()
            .zip(&g)
            .map(|(&pi, &gi)| {
                let pn = pi / (ps + LOSS_EPS);
                let gn = gi / (gs + LOSS_EPS);
                gn * (gn / (pn + LOSS_EPS) + LOSS_EPS).ln()
            })
            .sum();
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn kld_rejects_zero_target() {
        let p = t4(&[0.5; 16], 4, 4);
        let g = t4(&[0.0; 16], 4, 4);
        let err = kld_loss(&p, &g).unwrap_err();
        assert_eq!(err.category(), "data");
    }

    #[test]
    fn kld_averages_over_batch() {
        let va = uniform_vals(6, 16, 0.1, 1.0);
        let vb = uniform_vals(7, 16, 0.1, 1.0);
        let ga = uniform_vals(8, 16, 0.1, 1.0);
        let gb = uniform_vals(9, 16, 0.1, 1.0);
        let single = |p: &[f64], g: &[f64]| {
            scalar(&kld_loss(&t4(p, 4, 4), &t4(g, 4, 4)).unwrap())
        };
        let mut pv = va.clone();
        pv.extend_from_slice(&vb);
        let mut gv = ga.clone();
        gv.extend_from_slice(&gb);
        let p = Tensor::from_vec(pv, (2, 1, 4, 4), &dev()).unwrap();
        let g = Tensor::from_vec(gv, (2, 1, 4, 4), &dev()).unwrap();
        let got = scalar(&kld_loss(&p, &g).unwrap());
        let want = 0.5 * (single(&va, &ga) + single(&vb, &gb));
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn dd_zero_for_equal_and_csquared_for_offset() {
        let e = uniform_vals(10, 64, -2.0, 2.0);
        let t = t4(&e, 8, 8);
        assert_eq!(scalar(&dd_loss(&t, &t).unwrap()), 0.0);
        let c = 0.75;
        let shifted: Vec<f64> = e.iter().map(|v| v + c).collect();
        let got = scalar(&dd_loss(&t, &t4(&shifted, 8, 8)).unwrap());
        assert!((got - c * c).abs() < 1e-12, "{got}");
    }

    #[test]
    fn dd_matches_loop_oracle() {
        let a = uniform_vals(11, 64, -1.0, 1.0);
        let b = uniform_vals(12, 64, -1.0, 1.0);
        let got = scalar(&dd_loss(&t4(&a, 8, 8), &t4(&b, 8, 8)).unwrap());
        let want = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 64.0;
        assert!((got - want).abs() < 1e-12);
    }

    fn constant_terms(a: f64, b: f64, c: f64) -> Vec<ScaleTerms> {
        (0..NUM_SCALES)
            .map(|_| ScaleTerms {
                bce: Tensor::full(a, (), &dev()).unwrap(),
                kld: Tensor::full(b, (), &dev()).unwrap(),
                dd: Tensor::full(c, (), &dev()).unwrap(),
            })
            .collect()
    }

    #[test]
    fn total_averages_equal_scales_to_the_weighted_sum() {
        let terms = constant_terms(0.4, 1.2, 3.0);
        let w = LossWeights::new(1.0, 1.0, 0.001).unwrap();
        let got = scalar(&total_loss(&terms, &w).unwrap());
        let want = 0.4 + 1.2 + 0.001 * 3.0;
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn total_rejects_missing_scale() {
        let mut terms = constant_terms(0.1, 0.1, 0.1);
        terms.pop();
        let w = LossWeights::standard();
        assert_eq!(total_loss(&terms, &w).unwrap_err().category(), "contract");
    }

    #[test]
    fn scaling_all_weights_by_a_power_of_two_scales_the_total_exactly() {
        let terms = constant_terms(0.37, 0.81, 2.13);
        let w = LossWeights::new(1.0, 0.2, 0.001).unwrap();
        let base = scalar(&total_loss(&terms, &w).unwrap());
        for k in [2.0, 0.5, 4.0] {
            let scaled = LossWeights::new(w.lambda1 * k, w.lambda2 * k, w.lambda3 * k).unwrap();
            let got = scalar(&total_loss(&terms, &scaled).unwrap());
            assert_eq!(got, base * k, "k={k}");
        }
    }

    #[test]
    fn weights_validate_sign_and_degeneracy() {
        assert_eq!(
            LossWeights::new(-1.0, 0.0, 0.0).unwrap_err().category(),
            "config"
        );
        assert_eq!(
            LossWeights::new(0.0, 0.0, 0.0).unwrap_err().category(),
            "config"
        );
        assert!(LossWeights::new(0.0, 0.0, 1.0).is_ok());
    }

    #[test]
    fn dataset_presets_cover_the_published_table() {
        assert_eq!(LossWeights::for_dataset("TrafficGaze").unwrap().lambda2, 1.0);
        assert_eq!(LossWeights::for_dataset("DADA2000").unwrap().lambda2, 0.2);
        assert_eq!(LossWeights::for_dataset("BDDA").unwrap().lambda2, 0.1);
        assert_eq!(
            LossWeights::for_dataset("DrFixD-rainy").unwrap().lambda2,
            1.0
        );
        assert!(LossWeights::for_dataset("unknown").is_none());
        for name in ["TrafficGaze", "DADA2000", "BDDA", "DrFixD-rainy"] {
            let w = LossWeights::for_dataset(name).unwrap();
            assert_eq!((w.lambda1, w.lambda3), (1.0, 0.001));
        }
    }

    #[test]
    fn scale_terms_upsample_matches_host_path() {
        // BCE of an upsampled coarse prediction must equal the hand loop on
        // the host-resized map (same interpolation convention).
        let pv = uniform_vals(13, 16, 0.05, 0.95);
        let gv = uniform_vals(14, 64, 0.0, 1.0);
        let pred = t4(&pv, 4, 4);
        let gt = t4(&gv, 8, 8);
        let eps = t4(&[0.0; 16], 4, 4);
        let terms = scale_terms(&pred, &gt, &eps, &eps).unwrap();
        let up = crate::util::bilinear_resize_array(
            &ndarray::Array2::from_shape_vec((4, 4), pv).unwrap(),
            8,
            8,
        );
        let want = -up
            .iter()
            .zip(&gv)
            .map(|(&pi, &gi)| {
                let pc = pi.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
                gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln()
            })
            .sum::<f64>()
            / 64.0;
        let got = scalar(&terms.bce);
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
        assert_eq!(scalar(&terms.dd), 0.0);
    }

    #[test]
    fn gradients_flow_through_pixel_losses() {
        // Finite differences on every prediction element through the full
        // composite (upsample + BCE + KLD + DD).
        let pv = uniform_vals(15, 16, 0.1, 0.9);
        let gv = uniform_vals(16, 64, 0.05, 1.0);
        let var = Var::from_vec(pv.clone(), (1, 1, 4, 4), &dev()).unwrap();
        let gt = t4(&gv, 8, 8);
        let noise = standard_normal_vec(&mut derive_rng(17, 1), 16);
        let eps = t4(&noise, 4, 4);
        let w = LossWeights::new(1.0, 0.7, 0.3).unwrap();

        let eval = |p: &Tensor| -> f64 {
            let terms = vec![
                scale_terms(p, &gt, &eps, p).unwrap(),
                scale_terms(p, &gt, &eps, p).unwrap(),
                scale_terms(p, &gt, &eps, p).unwrap(),
                scale_terms(p, &gt, &eps, p).unwrap(),
            ];
            scalar(&total_loss(&terms, &w).unwrap())
        };

        let x = var.as_tensor().clone();
        let terms: Vec<ScaleTerms> = (0..4)
            .map(|_| scale_terms(&x, &gt, &eps, &x).unwrap())
            .collect();
        let loss = total_loss(&terms, &w).unwrap();
        let grads = loss.backward().unwrap();
        let g = crate::util::tensor_to_f64_vec(grads.get(&x).expect("grad")).unwrap();

        let h = 1e-6;
        for i in 0..16 {
            let mut plus = pv.clone();
            plus[i] += h;
            let mut minus = pv.clone();
            minus[i] -= h;
            let fd = (eval(&t4(&plus, 4, 4)) - eval(&t4(&minus, 4, 4))) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!(
                (fd - g[i]).abs() / denom < 1e-5,
                "element {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }

    proptest! {
        #[test]
        fn pixel_losses_stay_finite(
            pv in proptest::collection::vec(0.0f64..=1.0, 16),
            gv in proptest::collection::vec(0.0f64..=1.0, 16),
        ) {
            let p = t4(&pv, 4, 4);
            let g = t4(&gv, 4, 4);
            let b = scalar(&bce_loss(&p, &g).unwrap());
            prop_assert!(b.is_finite());
            if gv.iter().sum::<f64>() > 0.0 {
                let k = scalar(&kld_loss(&p, &g).unwrap());
                prop_assert!(k.is_finite());
            }
        }
    }
}
