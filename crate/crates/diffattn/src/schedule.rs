//! Diffusion noise schedule and forward/reverse process primitives.
//!
//! The forward process corrupts a target `x0` over `T` discrete steps with a
//! linear variance schedule `beta`. Closed-form marginals use the cumulative
//! product `alpha_bar[t] = prod_{k<=t} (1 - beta[k])`:
//!
//! `q(x_tau | x0) = N(sqrt(alpha_bar[tau]) * x0, (1 - alpha_bar[tau]) * I)`
//!
//! Reverse inference offers the stochastic ancestral step (DDPM) and the
//! deterministic skip-step update (DDIM) used for few-step sampling. A
//! [`SamplingPlan`] is a strictly decreasing subset of step indices; executing
//! a plan ends with an explicit projection to the clean estimate `x0_hat`
//! rather than a final noisy residual, so a perfect noise predictor inverts
//! the corruption exactly.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::util::per_sample_coef;

/// Variance schedule and derived coefficient tables, all in `f64`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
    /// Transition noise scale for the ancestral step: `sqrt(beta)`, with
    /// `sigma[0] = 0` (the final step is deterministic).
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule from `beta_start` to `beta_end` over `t_i` steps.
    pub fn linear(t_i: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_i == 0 {
            return Err(Error::Config(
                "schedule length t_i must be at least 1".into(),
            ));
        }
        if !(beta_start > 0.0) {
            return Err(Error::Config(format!(
                "beta_start must satisfy 0 < beta_start, got {beta_start}"
            )));
        }
        if !(beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta_end must satisfy beta_end < 1, got {beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::Config(format!(
                "beta_start ({beta_start}) must not exceed beta_end ({beta_end})"
            )));
        }
        let beta: Vec<f64> = (0..t_i)
            .map(|t| {
                if t_i == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (t_i - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sqrt_alpha_bar: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar: Vec<f64> = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        let sigma: Vec<f64> = beta
            .iter()
            .enumerate()
            .map(|(t, b)| if t == 0 { 0.0 } else { b.sqrt() })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
            sigma,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_tau(&self, tau: usize) -> Result<()> {
        if tau >= self.len() {
            return Err(Error::Step(format!(
                "step index {tau} outside schedule of length {}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, tau: usize) -> Result<f64> {
        self.check_tau(tau)?;
        Ok(self.beta[tau])
    }

    pub fn alpha(&self, tau: usize) -> Result<f64> {
        self.check_tau(tau)?;
        Ok(self.alpha[tau])
    }

    pub fn alpha_bar(&self, tau: usize) -> Result<f64> {
        self.check_tau(tau)?;
        Ok(self.alpha_bar[tau])
    }

    pub fn sigma(&self, tau: usize) -> Result<f64> {
        self.check_tau(tau)?;
        Ok(self.sigma[tau])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    /// Forward corruption at step `tau`: `sqrt(ab)*x0 + sqrt(1-ab)*eps`.
    pub fn q_sample(&self, x0: &Tensor, tau: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_tau(tau)?;
        Self::check_same_shape(x0, eps, "q_sample")?;
        let a = x0.affine(self.sqrt_alpha_bar[tau], 0.0)?;
        let b = eps.affine(self.sqrt_one_minus_alpha_bar[tau], 0.0)?;
        Ok((a + b)?)
    }

    /// Forward corruption with a per-batch-element step index; `x0` and `eps`
    /// are NCHW with batch size `taus.len()`.
    pub fn q_sample_batch(&self, x0: &Tensor, taus: &[usize], eps: &Tensor) -> Result<Tensor> {
        Self::check_same_shape(x0, eps, "q_sample_batch")?;
        let (b, _, _, _) = x0.dims4().map_err(|_| {
            Error::Shape(format!(
                "q_sample_batch expects NCHW, got shape {:?}",
                x0.shape()
            ))
        })?;
        if taus.len() != b {
            return Err(Error::Shape(format!(
                "q_sample_batch: {} step indices for batch of {b}",
                taus.len()
            )));
        }
        let ca = per_sample_coef(&self.sqrt_alpha_bar, taus, x0.dtype(), x0.device())?;
        let cb = per_sample_coef(&self.sqrt_one_minus_alpha_bar, taus, x0.dtype(), x0.device())?;
        Ok((x0.broadcast_mul(&ca)? + eps.broadcast_mul(&cb)?)?)
    }

    /// Clean estimate implied by a noise prediction at step `tau`:
    /// `x0_hat = (x - sqrt(1-ab)*eps_hat) / sqrt(ab)`.
    pub fn denoise_to_x0(&self, x: &Tensor, eps_hat: &Tensor, tau: usize) -> Result<Tensor> {
        self.check_tau(tau)?;
        Self::check_same_shape(x, eps_hat, "denoise_to_x0")?;
        let num = (x - eps_hat.affine(self.sqrt_one_minus_alpha_bar[tau], 0.0)?)?;
        Ok(num.affine(1.0 / self.sqrt_alpha_bar[tau], 0.0)?)
    }

    /// Batched [`Self::denoise_to_x0`] with per-element step indices.
    pub fn denoise_to_x0_batch(
        &self,
        x: &Tensor,
        eps_hat: &Tensor,
        taus: &[usize],
    ) -> Result<Tensor> {
        Self::check_same_shape(x, eps_hat, "denoise_to_x0_batch")?;
        let (b, _, _, _) = x.dims4().map_err(|_| {
            Error::Shape(format!(
                "denoise_to_x0_batch expects NCHW, got shape {:?}",
                x.shape()
            ))
        })?;
        if taus.len() != b {
            return Err(Error::Shape(format!(
                "denoise_to_x0_batch: {} step indices for batch of {b}",
                taus.len()
            )));
        }
        let comb = per_sample_coef(&self.sqrt_one_minus_alpha_bar, taus, x.dtype(), x.device())?;
        let inv_ab: Vec<f64> = self.sqrt_alpha_bar.iter().map(|v| 1.0 / v).collect();
        let cinv = per_sample_coef(&inv_ab, taus, x.dtype(), x.device())?;
        Ok((x - eps_hat.broadcast_mul(&comb)?)?.broadcast_mul(&cinv)?)
    }

    /// Stochastic ancestral step from `tau` to `tau-1`:
    /// `mu = (x - beta/sqrt(1-ab) * eps_hat) / sqrt(alpha)`, plus
    /// `sigma[tau] * noise`. Rejects `tau = 0`; use [`Self::denoise_to_x0`]
    /// to finish a chain.
    pub fn ddpm_step(
        &self,
        x: &Tensor,
        eps_hat: &Tensor,
        tau: usize,
        noise: &Tensor,
    ) -> Result<Tensor> {
        self.check_tau(tau)?;
        if tau == 0 {
            return Err(Error::Step(
                "ddpm_step at tau = 0: the final step has no predecessor; \
                 project with denoise_to_x0 instead"
                    .into(),
            ));
        }
        Self::check_same_shape(x, eps_hat, "ddpm_step")?;
        Self::check_same_shape(x, noise, "ddpm_step noise")?;
        let scale = 1.0 / self.alpha[tau].sqrt();
        let eps_coef = self.beta[tau] / self.sqrt_one_minus_alpha_bar[tau];
        let mu = ((x - eps_hat.affine(eps_coef, 0.0)?)?).affine(scale, 0.0)?;
        Ok((mu + noise.affine(self.sigma[tau], 0.0)?)?)
    }

    /// Deterministic skip step from `tau` to the earlier step `tau_next`:
    /// re-noise the implied clean estimate to the target step.
    pub fn ddim_step(
        &self,
        x: &Tensor,
        eps_hat: &Tensor,
        tau: usize,
        tau_next: usize,
    ) -> Result<Tensor> {
        self.ddim_step_eta(x, eps_hat, tau, tau_next, 0.0, None)
    }

    /// Skip step with optional stochasticity `eta` in [0,1] (`eta = 0` is the
    /// deterministic update; `eta > 0` reintroduces `noise` with the
    /// interpolated posterior scale).
    pub fn ddim_step_eta(
        &self,
        x: &Tensor,
        eps_hat: &Tensor,
        tau: usize,
        tau_next: usize,
        eta: f64,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        self.check_tau(tau)?;
        if tau_next >= tau {
            return Err(Error::Step(format!(
                "ddim_step must move backward in time: tau_next ({tau_next}) >= tau ({tau})"
            )));
        }
        Self::check_same_shape(x, eps_hat, "ddim_step")?;
        let x0 = self.denoise_to_x0(x, eps_hat, tau)?;
        let ab_next = self.alpha_bar[tau_next];
        if eta == 0.0 {
            let a = x0.affine(ab_next.sqrt(), 0.0)?;
            let b = eps_hat.affine((1.0 - ab_next).sqrt(), 0.0)?;
            return Ok((a + b)?);
        }
        let ab = self.alpha_bar[tau];
        let sigma =
            eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).sqrt();
        let dir_coef = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
        let noise = noise.ok_or_else(|| {
            Error::Contract("ddim_step_eta with eta > 0 requires a noise tensor".into())
        })?;
        Self::check_same_shape(x, noise, "ddim_step noise")?;
        let out = (x0.affine(ab_next.sqrt(), 0.0)? + eps_hat.affine(dir_coef, 0.0)?)?;
        Ok((out + noise.affine(sigma, 0.0)?)?)
    }

    /// Runs a sampling plan from an initial latent, calling `eps_fn(x, tau)`
    /// for the noise estimate at each plan entry. Intermediate entries use the
    /// deterministic skip step; the last entry projects to `x0_hat`. Latents
    /// are checked for non-finite values after every step.
    pub fn run_plan<F>(&self, x_init: &Tensor, plan: &SamplingPlan, mut eps_fn: F) -> Result<Tensor>
    where
        F: FnMut(&Tensor, usize) -> Result<Tensor>,
    {
        plan.validate_against(self)?;
        let mut x = x_init.clone();
        let steps = plan.steps();
        for (i, &tau) in steps.iter().enumerate() {
            let eps_hat = eps_fn(&x, tau)?;
            x = if i + 1 < steps.len() {
                self.ddim_step(&x, &eps_hat, tau, steps[i + 1])?
            } else {
                self.denoise_to_x0(&x, &eps_hat, tau)?
            };
            let finite = crate::util::tensor_to_f64_vec(&x)?
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::Numeric(format!(
                    "non-finite latent after denoising at step index {tau}"
                )));
            }
        }
        Ok(x)
    }

    /// Traced variant of [`Self::run_plan`]: also returns the latent after
    /// every plan entry (the last snapshot is the final `x0_hat`).
    pub fn run_plan_traced<F>(
        &self,
        x_init: &Tensor,
        plan: &SamplingPlan,
        mut eps_fn: F,
    ) -> Result<(Tensor, Vec<(usize, Tensor)>)>
    where
        F: FnMut(&Tensor, usize) -> Result<Tensor>,
    {
        let mut trace = Vec::with_capacity(plan.num_steps());
        let out = self.run_plan(x_init, plan, |x, tau| {
            let eps = eps_fn(x, tau)?;
            trace.push((tau, x.clone()));
            Ok(eps)
        })?;
        trace.push((0, out.clone()));
        Ok((out, trace))
    }
}

/// Strictly decreasing sequence of schedule step indices used at inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPlan {
    steps: Vec<usize>,
}

impl SamplingPlan {
    /// `t_e` indices evenly spaced over `[0, t_i)`, from `t_i - 1` down to 0.
    /// Requires `1 <= t_e <= t_i` so gaps never collapse below one step.
    pub fn evenly_spaced(t_i: usize, t_e: usize) -> Result<Self> {
        if t_e == 0 || t_e > t_i {
            return Err(Error::Step(format!(
                "plan size t_e must lie in [1, t_i={t_i}], got {t_e}"
            )));
        }
        if t_e == 1 {
            return Ok(Self {
                steps: vec![t_i - 1],
            });
        }
        let mut steps: Vec<usize> = (0..t_e)
            .map(|k| {
                ((t_i - 1) as f64 * k as f64 / (t_e - 1) as f64).round() as usize
            })
            .collect();
        steps.reverse();
        Ok(Self { steps })
    }

    /// Wraps explicit step indices; must be strictly decreasing and nonempty.
    pub fn from_steps(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Step("sampling plan must be nonempty".into()));
        }
        if !steps.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Step(format!(
                "sampling plan must be strictly decreasing, got {steps:?}"
            )));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Checks all indices fall inside the schedule.
    pub fn validate_against(&self, sched: &NoiseSchedule) -> Result<()> {
        let first = self.steps[0];
        if first >= sched.len() {
            return Err(Error::Step(format!(
                "plan starts at step {first} but the schedule has only {} steps",
                sched.len()
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a step index; `dim` must be even and >= 2. The
/// first half holds sines, the second half cosines, over geometrically spaced
/// frequencies from 1 down to 1/10000.
pub fn time_embedding(tau: usize, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "time embedding dimension must be even and >= 2, got {dim}"
        )));
    }
    let half = dim / 2;
    let denom = (half - 1).max(1) as f64;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / denom).exp();
        let arg = tau as f64 * freq;
        v[i] = arg.sin();
        v[half + i] = arg.cos();
    }
    Ok(v)
}
