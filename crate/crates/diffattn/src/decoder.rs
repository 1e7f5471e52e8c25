//! Multi-scale conditional diffusion decoder.
//!
//! For each scale `s` in `{0,1,2,3}` a visual condition is assembled from the
//! fused pyramid (deepest scale: the level-3 map upsampled 4x and projected;
//! finer scales: all levels from `s` up, upsampled to `(H/2^s, W/2^s)`,
//! concatenated and projected, plus the previous scale's saliency estimate
//! mapped through a 1x1 conv and upsampled 2x). A small per-scale U-Net
//! predicts noise from (noisy map, time embedding, condition) summed at the
//! stem, and sampling runs coarse to fine so every finer scale is conditioned
//! on the coarser result.
//!
//! Diffusion operates on logit-domain targets clamped away from `{0,1}`, so
//! the final sigmoid is the exact inverse of the target construction.

use candle_core::{DType, Module, Tensor};
use candle_nn::{Conv2dConfig, GroupNorm, Linear};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};
use crate::schedule::{time_embedding, NoiseSchedule, SamplingPlan};
use crate::util::standard_normal_tensor;

/// Width of the sinusoidal time embedding fed to the predictors.
pub const TIME_EMBED_DIM: usize = 128;

/// Clamp bound keeping targets strictly inside (0, 1) before the logit map.
pub const LOGIT_CLAMP: f64 = 1e-4;

/// Stream base for per-scale sampling noise.
const SAMPLE_STREAM_BASE: u64 = 0x6465636f_6465;

/// Maps `[0,1]` saliency to the diffusion target domain.
pub fn to_logit_target(gt: &Tensor) -> Result<Tensor> {
    let p = gt.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)?;
    let one_minus = (1.0 - &p)?;
    Ok((p.log()? - one_minus.log()?)?)
}

/// Inverse of [`to_logit_target`] up to the clamp.
pub fn from_logit(z: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(z)?)
}

/// Per-scale conditioning volume at `(H/2^s, W/2^s)`.
#[derive(Debug, Clone)]
pub struct VisualCondition {
    scale: usize,
    volume: Tensor,
}

impl VisualCondition {
    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn volume(&self) -> &Tensor {
        &self.volume
    }
}

/// Builds the four visual conditions from a fused pyramid.
#[derive(Debug)]
pub struct Conditioner {
    /// `f[s]`: 3x3 projection of the concatenated features at scale `s`.
    f: Vec<Conv2d>,
    /// `g[s]` for `s < 3`: 1x1 lift of the coarser saliency map.
    g: Vec<Conv2d>,
    base_channels: usize,
    d_cond: usize,
}

/// Channel count of the feature concatenation entering `f[s]`.
fn concat_width(base_channels: usize, s: usize) -> usize {
    (s..4).map(|j| base_channels << j).sum()
}

impl Conditioner {
    pub fn new(pb: &ParamBuilder, base_channels: usize, d_cond: usize) -> Result<Self> {
        let pb = pb.pp("cond");
        let cfg3 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut f = Vec::with_capacity(4);
        for s in 0..4 {
            let in_c = if s == 3 {
                base_channels << 3
            } else {
                concat_width(base_channels, s)
            };
            f.push(pb.conv2d(&format!("f{s}"), in_c, d_cond, 3, cfg3)?);
        }
        let mut g = Vec::with_capacity(3);
        for s in 0..3 {
            g.push(pb.conv2d(&format!("g{s}"), 1, d_cond, 1, Conv2dConfig::default())?);
        }
        Ok(Self {
            f,
            g,
            base_channels,
            d_cond,
        })
    }

    pub fn d_cond(&self) -> usize {
        self.d_cond
    }

    /// Assembles `c^s`. `coarser` is the sampled map of scale `s+1` and must
    /// be present exactly when `s < 3`.
    pub fn build(
        &self,
        s: usize,
        fused: &FeaturePyramid,
        coarser: Option<&Tensor>,
    ) -> Result<VisualCondition> {
        if s > 3 {
            return Err(Error::Contract(format!("scale index {s} out of range")));
        }
        if fused.base_channels() != self.base_channels {
            return Err(Error::Contract(format!(
                "conditioner built for base width {}, pyramid has {}",
                self.base_channels,
                fused.base_channels()
            )));
        }
        let (b, _, h0, w0) = fused.level(0).dims4()?;
        let (input_h, input_w) = (h0 * 4, w0 * 4);
        let (th, tw) = (input_h >> s, input_w >> s);
        let volume = if s == 3 {
            if coarser.is_some() {
                return Err(Error::Contract(
                    "the deepest scale takes no coarser saliency input".into(),
                ));
            }
            let up = fused.level(3).upsample_nearest2d(th, tw)?;
            self.f[3].forward(&up)?.elu(1.0)?
        } else {
            let coarser = coarser.ok_or_else(|| {
                Error::Contract(format!(
                    "scale {s} condition requires the sampled map of scale {}",
                    s + 1
                ))
            })?;
            let want = (b, 1, th / 2, tw / 2);
            let got = coarser.dims4()?;
            if got != want {
                return Err(Error::Contract(format!(
                    "coarser saliency for scale {s} must have shape {want:?}, got {got:?}"
                )));
            }
            let mut parts = Vec::with_capacity(4 - s);
            for j in s..4 {
                parts.push(fused.level(j).upsample_nearest2d(th, tw)?);
            }
            let stacked = Tensor::cat(&parts.iter().collect::<Vec<_>>(), 1)?;
            let feat = self.f[s].forward(&stacked)?.elu(1.0)?;
            let lifted = self.g[s].forward(coarser)?.upsample_nearest2d(th, tw)?;
            (feat + lifted)?
        };
        Ok(VisualCondition { scale: s, volume })
    }
}

/// Anything that can estimate the noise component of a latent.
pub trait NoisePredictor {
    fn predict(&self, noisy: &Tensor, taus: &[usize], cond: &VisualCondition) -> Result<Tensor>;
}

/// Pre-activation residual block: `x + conv(elu(norm(conv(elu(norm(x))))))`.
#[derive(Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            norm1: pb.group_norm("norm1", channels)?,
            conv1: pb.conv2d("conv1", channels, channels, 3, cfg)?,
            norm2: pb.group_norm("norm2", channels)?,
            conv2: pb.conv2d("conv2", channels, channels, 3, cfg)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.elu(1.0)?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.elu(1.0)?)?;
        Ok((x + h)?)
    }
}

/// Per-scale noise predictor: two downsampling and two upsampling stages
/// around a middle block, with the noisy map, condition, and time embedding
/// summed at the stem. The output projection starts at zero so the first
/// prediction is the zero map.
#[derive(Debug)]
pub struct ScaleUnet {
    conv_in: Conv2d,
    cond_proj: Conv2d,
    time1: Linear,
    time2: Linear,
    down1: ResBlock,
    down_conv1: Conv2d,
    down2: ResBlock,
    down_conv2: Conv2d,
    mid: ResBlock,
    merge1: Conv2d,
    up1: ResBlock,
    merge2: Conv2d,
    up2: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    width: usize,
    d_cond: usize,
    t_i: usize,
}

impl ScaleUnet {
    pub fn new(pb: &ParamBuilder, d_cond: usize, width: usize, t_i: usize) -> Result<Self> {
        if width < 2 {
            return Err(Error::Config(format!(
                "noise predictor width must be at least 2, got {width}"
            )));
        }
        let cfg3 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let cfg_down = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let w = width;
        Ok(Self {
            conv_in: pb.conv2d("conv_in", 1, w, 3, cfg3)?,
            cond_proj: pb.conv2d("cond_proj", d_cond, w, 1, Conv2dConfig::default())?,
            time1: pb.linear("time1", TIME_EMBED_DIM, w)?,
            time2: pb.linear("time2", w, w)?,
            down1: ResBlock::new(&pb.pp("down1"), w)?,
            down_conv1: pb.conv2d("down_conv1", w, 2 * w, 3, cfg_down)?,
            down2: ResBlock::new(&pb.pp("down2"), 2 * w)?,
            down_conv2: pb.conv2d("down_conv2", 2 * w, 2 * w, 3, cfg_down)?,
            mid: ResBlock::new(&pb.pp("mid"), 2 * w)?,
            merge1: pb.conv2d("merge1", 4 * w, 2 * w, 1, Conv2dConfig::default())?,
            up1: ResBlock::new(&pb.pp("up1"), 2 * w)?,
            merge2: pb.conv2d("merge2", 3 * w, w, 1, Conv2dConfig::default())?,
            up2: ResBlock::new(&pb.pp("up2"), w)?,
            norm_out: pb.group_norm("norm_out", w)?,
            conv_out: pb.conv2d_zero("conv_out", w, 1, 3, cfg3)?,
            width: w,
            d_cond,
            t_i,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn time_term(&self, taus: &[usize], dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
        let mut host = Vec::with_capacity(taus.len() * TIME_EMBED_DIM);
        for &tau in taus {
            host.extend(time_embedding(tau, TIME_EMBED_DIM)?);
        }
        let emb = Tensor::from_vec(host, (taus.len(), TIME_EMBED_DIM), dev)?.to_dtype(dtype)?;
        let t = self.time2.forward(&self.time1.forward(&emb)?.elu(1.0)?)?;
        Ok(t.reshape((taus.len(), self.width, 1, 1))?)
    }

    fn forward(&self, noisy: &Tensor, taus: &[usize], cond: &VisualCondition) -> Result<Tensor> {
        let (b, c, h, w) = noisy.dims4().map_err(|_| {
            Error::Shape(format!(
                "noise predictor expects (B,1,H,W) input, got {:?}",
                noisy.shape()
            ))
        })?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "noise predictor input must have one channel, got {c}"
            )));
        }
        let (cb, cc, ch, cw) = cond.volume().dims4()?;
        if cc != self.d_cond {
            return Err(Error::Shape(format!(
                "noise predictor built for condition width {}, got {cc}",
                self.d_cond
            )));
        }
        if (cb, ch, cw) != (b, h, w) {
            return Err(Error::Shape(format!(
                "condition shape ({cb},{cc},{ch},{cw}) does not match noisy input \
                 ({b},{c},{h},{w})"
            )));
        }
        if taus.len() != b {
            return Err(Error::Shape(format!(
                "{} step indices for batch of {b}",
                taus.len()
            )));
        }
        for &tau in taus {
            if tau >= self.t_i {
                return Err(Error::Step(format!(
                    "step index {tau} outside schedule of length {}",
                    self.t_i
                )));
            }
        }
        let time = self.time_term(taus, noisy.dtype(), noisy.device())?;
        let stem = (self.conv_in.forward(noisy)?
            + self.cond_proj.forward(cond.volume())?)?
        .broadcast_add(&time)?;
        let d1 = self.down1.forward(&stem)?;
        let h1 = self.down_conv1.forward(&d1)?;
        let d2 = self.down2.forward(&h1)?;
        let h2 = self.down_conv2.forward(&d2)?;
        let m = self.mid.forward(&h2)?;

        let (_, _, sh, sw) = d2.dims4()?;
        let u = m.upsample_nearest2d(sh, sw)?;
        let u = self.merge1.forward(&Tensor::cat(&[&u, &d2], 1)?)?;
        let u = self.up1.forward(&u)?;
        let (_, _, sh, sw) = d1.dims4()?;
        let u = u.upsample_nearest2d(sh, sw)?;
        let u = self.merge2.forward(&Tensor::cat(&[&u, &d1], 1)?)?;
        let u = self.up2.forward(&u)?;
        Ok(self
            .conv_out
            .forward(&self.norm_out.forward(&u)?.elu(1.0)?)?)
    }
}

impl NoisePredictor for ScaleUnet {
    fn predict(&self, noisy: &Tensor, taus: &[usize], cond: &VisualCondition) -> Result<Tensor> {
        self.forward(noisy, taus, cond)
    }
}

/// Samples one scale: seeded Gaussian start, plan-driven denoising, sigmoid.
pub fn sample_scale(
    net: &dyn NoisePredictor,
    cond: &VisualCondition,
    sched: &NoiseSchedule,
    plan: &SamplingPlan,
    seed: u64,
) -> Result<Tensor> {
    let (z, _) = sample_scale_inner(net, cond, sched, plan, seed, false)?;
    from_logit(&z)
}

/// Like [`sample_scale`], but also returns the post-sigmoid latent after each
/// plan entry (coarse progress first, final map last).
pub fn sample_scale_traced(
    net: &dyn NoisePredictor,
    cond: &VisualCondition,
    sched: &NoiseSchedule,
    plan: &SamplingPlan,
    seed: u64,
) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
    let (z, trace) = sample_scale_inner(net, cond, sched, plan, seed, true)?;
    let mut mapped = Vec::with_capacity(trace.len());
    for (tau, t) in trace {
        mapped.push((tau, from_logit(&t)?));
    }
    Ok((from_logit(&z)?, mapped))
}

fn sample_scale_inner(
    net: &dyn NoisePredictor,
    cond: &VisualCondition,
    sched: &NoiseSchedule,
    plan: &SamplingPlan,
    seed: u64,
    traced: bool,
) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
    let (b, _, h, w) = cond.volume().dims4()?;
    let mut rng = crate::util::derive_rng(seed, SAMPLE_STREAM_BASE + cond.scale() as u64);
    let init = standard_normal_tensor(
        &mut rng,
        &[b, 1, h, w],
        cond.volume().dtype(),
        cond.volume().device(),
    )?;
    let eps_fn = |x: &Tensor, tau: usize| net.predict(x, &vec![tau; b], cond);
    if traced {
        let (out, trace) = sched.run_plan_traced(&init, plan, eps_fn)?;
        Ok((out, trace))
    } else {
        Ok((sched.run_plan(&init, plan, eps_fn)?, Vec::new()))
    }
}

/// The four sampled maps, indexed by scale (`maps[0]` is full resolution).
#[derive(Debug, Clone)]
pub struct ScaleOutputs {
    maps: Vec<Tensor>,
}

impl ScaleOutputs {
    pub fn map(&self, s: usize) -> &Tensor {
        &self.maps[s]
    }

    /// The full-resolution map; the only one evaluation consumes.
    pub fn final_map(&self) -> &Tensor {
        &self.maps[0]
    }
}

/// Coarse-to-fine sampling over all scales; `seeds[s]` drives the initial
/// latent of scale `s`.
pub fn decode_all_with_seeds(
    conditioner: &Conditioner,
    nets: [&dyn NoisePredictor; 4],
    fused: &FeaturePyramid,
    sched: &NoiseSchedule,
    plan: &SamplingPlan,
    seeds: [u64; 4],
) -> Result<ScaleOutputs> {
    let mut maps: Vec<Option<Tensor>> = vec![None; 4];
    let mut coarser: Option<Tensor> = None;
    for s in (0..4).rev() {
        let cond = conditioner.build(s, fused, coarser.as_ref())?;
        let map = sample_scale(nets[s], &cond, sched, plan, seeds[s])?;
        coarser = Some(map.clone());
        maps[s] = Some(map);
    }
    Ok(ScaleOutputs {
        maps: maps.into_iter().map(Option::unwrap).collect(),
    })
}

/// [`decode_all_with_seeds`] with a single seed shared by all scales (each
/// scale still draws from its own stream).
pub fn decode_all(
    conditioner: &Conditioner,
    nets: [&dyn NoisePredictor; 4],
    fused: &FeaturePyramid,
    sched: &NoiseSchedule,
    plan: &SamplingPlan,
    seed: u64,
) -> Result<ScaleOutputs> {
    decode_all_with_seeds(conditioner, nets, fused, sched, plan, [seed; 4])
}

/// Diffusion quantities for one scale of one training step.
#[derive(Debug)]
pub struct ScaleLatents {
    /// Logit-domain target `z_g`.
    pub z_target: Tensor,
    /// Corrupted latent `q(z_tau | z_g)`.
    pub noisy: Tensor,
    /// Per-element step indices.
    pub taus: Vec<usize>,
    /// The exact noise used for the corruption (the regression target).
    pub eps: Tensor,
}

/// Draws per-scale, per-element steps and noise and forms the corrupted
/// latents for a batch of per-scale ground-truth maps.
pub fn prepare_latents(
    gts: &[Tensor],
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ScaleLatents>> {
    let mut out = Vec::with_capacity(gts.len());
    for gt in gts {
        let (b, _, _, _) = gt.dims4().map_err(|_| {
            Error::Shape(format!(
                "ground-truth map must be (B,1,H,W), got {:?}",
                gt.shape()
            ))
        })?;
        let z = to_logit_target(gt)?;
        let taus: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.len())).collect();
        let eps = standard_normal_tensor(rng, gt.dims(), gt.dtype(), gt.device())?;
        let noisy = sched.q_sample_batch(&z, &taus, &eps)?;
        out.push(ScaleLatents {
            z_target: z,
            noisy,
            taus,
            eps,
        });
    }
    Ok(out)
}

/// One-step clean estimate implied by a noise prediction, mapped back to
/// saliency: `sigmoid(x0_hat)`. Used for the map losses and for conditioning
/// the next finer scale during training.
pub fn training_estimate(
    sched: &NoiseSchedule,
    latents: &ScaleLatents,
    eps_hat: &Tensor,
) -> Result<Tensor> {
    let z0 = sched.denoise_to_x0_batch(&latents.noisy, eps_hat, &latents.taus)?;
    from_logit(&z0)
}
