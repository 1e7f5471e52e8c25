//! Saliency evaluation metrics: KLD, CC, SIM, NSS and AUC-Judd.
//!
//! Formulas follow the standard saliency-benchmark definitions, computed in
//! `f64` on host arrays. Distribution-based metrics (KLD, SIM) sum-normalize
//! both maps first; KLD additionally adds `METRIC_EPS` to every cell *before*
//! normalizing, applied identically to both sides, so `kld(g, g) = 0` exactly
//! and the result is a true (nonnegative) KL divergence. Degenerate inputs
//! take documented sentinel values and never produce NaN.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::saliency::FixationMap;

/// Smoothing constant shared by the divergence-style metrics and losses.
pub const METRIC_EPS: f64 = 1e-7;

fn check_same_dims(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_finite(a: &Array2<f64>, what: &str) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Exact constant-map detection; float mean subtraction on a constant map
/// leaves ~1e-17 residues, so variance comparisons cannot be trusted there.
fn is_constant(a: &Array2<f64>) -> bool {
    match a.first() {
        Some(&first) => a.iter().all(|&v| v == first),
        None => true,
    }
}

fn check_fix_dims(pred: &Array2<f64>, fix: &FixationMap) -> Result<()> {
    let (h, w) = pred.dim();
    if h != fix.height() || w != fix.width() {
        return Err(Error::Shape(format!(
            "prediction is {h}x{w} but fixation grid is {}x{}",
            fix.height(),
            fix.width()
        )));
    }
    Ok(())
}

/// Smoothed sum-normalization: `(v + eps) / (sum + n*eps)`; always a proper
/// distribution, even for an all-zero map (which becomes uniform).
fn normalize_eps(a: &Array2<f64>) -> Vec<f64> {
    let n = a.len() as f64;
    let sum: f64 = a.iter().sum();
    let denom = sum + n * METRIC_EPS;
    a.iter().map(|v| (v + METRIC_EPS) / denom).collect()
}

/// KL divergence `KL(gt || pred)` of the smoothed sum-normalized maps.
/// Lower is better; 0 iff the maps are proportional.
pub fn metric_kld(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_same_dims(pred, gt)?;
    check_finite(pred, "prediction")?;
    check_finite(gt, "ground truth")?;
    let p = normalize_eps(pred);
    let g = normalize_eps(gt);
    let mut kl = 0.0;
    for (gi, pi) in g.iter().zip(&p) {
        kl += gi * (gi / pi).ln();
    }
    // True KL is nonnegative; absorb float roundoff only.
    if kl < 0.0 && kl > -1e-9 {
        kl = 0.0;
    }
    Ok(kl)
}

/// Pearson correlation of the flattened maps; 0 if either map is constant.
pub fn metric_cc(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_same_dims(pred, gt)?;
    check_finite(pred, "prediction")?;
    check_finite(gt, "ground truth")?;
    if is_constant(pred) || is_constant(gt) {
        return Ok(0.0);
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gt.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let dp = p - mp;
        let dg = g - mg;
        cov += dp * dg;
        vp += dp * dp;
        vg += dg * dg;
    }
    if vp == 0.0 || vg == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0))
}

/// Histogram intersection `sum(min(p, g))` of the sum-normalized maps;
/// 0 if either map sums to zero.
pub fn metric_sim(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_same_dims(pred, gt)?;
    check_finite(pred, "prediction")?;
    check_finite(gt, "ground truth")?;
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    if sp <= 0.0 || sg <= 0.0 {
        return Ok(0.0);
    }
    let mut sim = 0.0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        sim += (p / sp).min(g / sg);
    }
    Ok(sim.clamp(0.0, 1.0))
}

/// Mean z-scored prediction value over fixation pixels (population standard
/// deviation); 0 if the prediction is constant.
pub fn metric_nss(pred: &Array2<f64>, fix: &FixationMap) -> Result<f64> {
    check_finite(pred, "prediction")?;
    check_fix_dims(pred, fix)?;
    if fix.is_empty() {
        return Err(Error::Data(
            "NSS is undefined without at least one fixation".into(),
        ));
    }
    if is_constant(pred) {
        return Ok(0.0);
    }
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let var = pred.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(0.0);
    }
    let std = var.sqrt();
    let mut s = 0.0;
    for &(x, y) in fix.fixations() {
        s += (pred[[y, x]] - mean) / std;
    }
    Ok(s / fix.fixations().len() as f64)
}

/// ROC area treating fixation pixels as positives: sweep thresholds over the
/// prediction values at fixations (ties treated as `>=`), trapezoidal
/// integration of TP rate against FP rate.
pub fn metric_auc_judd(pred: &Array2<f64>, fix: &FixationMap) -> Result<f64> {
    check_finite(pred, "prediction")?;
    check_fix_dims(pred, fix)?;
    if fix.is_empty() {
        return Err(Error::Data(
            "AUC-Judd is undefined without at least one fixation".into(),
        ));
    }
    let n_pix = pred.len();
    let n_fix = fix.fixations().len();
    if n_fix >= n_pix {
        // Every pixel is a positive; ranking is vacuous.
        return Ok(1.0);
    }
    let mut all: Vec<f64> = pred.iter().copied().collect();
    all.sort_by(f64::total_cmp);
    let mut fix_vals: Vec<f64> = fix
        .fixations()
        .iter()
        .map(|&(x, y)| pred[[y, x]])
        .collect();
    fix_vals.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = fix_vals.clone();
    thresholds.dedup();
    thresholds.reverse(); // descending

    let count_ge = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|v| *v < t);

    let mut points = vec![(0.0f64, 0.0f64)];
    for &t in &thresholds {
        let above_pix = count_ge(&all, t);
        let above_fix = count_ge(&fix_vals, t);
        let tp = above_fix as f64 / n_fix as f64;
        let fp = (above_pix - above_fix) as f64 / (n_pix - n_fix) as f64;
        points.push((fp, tp));
    }
    points.push((1.0, 1.0));

    let mut auc = 0.0;
    for w in points.windows(2) {
        let (f0, t0) = w[0];
        let (f1, t1) = w[1];
        auc += (f1 - f0) * (t0 + t1) / 2.0;
    }
    Ok(auc.clamp(0.0, 1.0))
}

/// Metric values for one evaluated sample.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub id: String,
    pub kld: f64,
    pub cc: f64,
    pub sim: f64,
    pub nss: f64,
    pub auc_j: f64,
}

/// Aggregate (mean) metric values over a report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateEval {
    pub n: usize,
    pub kld: f64,
    pub cc: f64,
    pub sim: f64,
    pub nss: f64,
    pub auc_j: f64,
}

/// Per-sample metric collection with range enforcement and serialization.
#[derive(Debug, Default, Clone)]
pub struct EvalReport {
    samples: Vec<SampleEval>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Computes all five metrics for one sample and appends them.
    pub fn evaluate(
        &mut self,
        id: &str,
        pred: &Array2<f64>,
        gt: &Array2<f64>,
        fix: &FixationMap,
    ) -> Result<&SampleEval> {
        let sample = SampleEval {
            id: id.to_string(),
            kld: metric_kld(pred, gt)?,
            cc: metric_cc(pred, gt)?,
            sim: metric_sim(pred, gt)?,
            nss: metric_nss(pred, fix)?,
            auc_j: metric_auc_judd(pred, fix)?,
        };
        self.push(sample)
    }

    /// Appends a sample after checking the metric range invariants.
    pub fn push(&mut self, s: SampleEval) -> Result<&SampleEval> {
        let ok = s.kld >= 0.0
            && (-1.0..=1.0).contains(&s.cc)
            && (0.0..=1.0).contains(&s.sim)
            && (0.0..=1.0).contains(&s.auc_j)
            && s.kld.is_finite()
            && s.nss.is_finite();
        if !ok {
            return Err(Error::Numeric(format!(
                "metric values out of range for sample {}: kld={} cc={} sim={} nss={} auc_j={}",
                s.id, s.kld, s.cc, s.sim, s.nss, s.auc_j
            )));
        }
        self.samples.push(s);
        Ok(self.samples.last().expect("just pushed"))
    }

    pub fn samples(&self) -> &[SampleEval] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean of each metric over all samples.
    pub fn aggregate(&self) -> Result<AggregateEval> {
        if self.samples.is_empty() {
            return Err(Error::Contract(
                "cannot aggregate an empty evaluation report".into(),
            ));
        }
        let n = self.samples.len() as f64;
        Ok(AggregateEval {
            n: self.samples.len(),
            kld: self.samples.iter().map(|s| s.kld).sum::<f64>() / n,
            cc: self.samples.iter().map(|s| s.cc).sum::<f64>() / n,
            sim: self.samples.iter().map(|s| s.sim).sum::<f64>() / n,
            nss: self.samples.iter().map(|s| s.nss).sum::<f64>() / n,
            auc_j: self.samples.iter().map(|s| s.auc_j).sum::<f64>() / n,
        })
    }

    /// Per-sample CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,kld,cc,sim,nss,auc_j\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                s.id, s.kld, s.cc, s.sim, s.nss, s.auc_j
            ));
        }
        out
    }

    /// Machine-readable `key=value` aggregate summary.
    pub fn summary_kv(&self) -> Result<String> {
        let a = self.aggregate()?;
        Ok(format!(
            "samples={}\nkld={:.6}\ncc={:.6}\nsim={:.6}\nnss={:.6}\nauc_j={:.6}\n",
            a.n, a.kld, a.cc, a.sim, a.nss, a.auc_j
        ))
    }
}
