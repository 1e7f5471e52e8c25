//! Whole-model assembly: backbone encoder, optional deepest-level sequence
//! enhancement, feature fusion, and the four per-scale conditioned denoising
//! networks, all registered under one parameter builder and sharing one noise
//! schedule.
//!
//! `train_forward` runs the coarse-to-fine training pass: it corrupts the
//! per-scale ground truth, predicts the noise at every scale, and feeds each
//! scale's one-step clean estimate to the next finer scale's conditioning, so
//! gradients from fine scales reach coarse networks through the chain.
//! `infer` runs the iterative sampler instead.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::config::{EnhanceMode, ModelSection};
use crate::decoder::{
    decode_all_with_seeds, sample_scale, sample_scale_traced, prepare_latents,
    training_estimate, Conditioner, NoisePredictor, ScaleOutputs, ScaleUnet,
};
use crate::encoder::{Encoder, FeaturePyramid};
use crate::enhance::{EnhanceProjections, Enhancer, ProjInit, SequenceLayer};
use crate::error::{Error, Result};
use crate::ffp::FeatureFusionPyramid;
use crate::loss::{scale_terms, total_loss, LossWeights, NUM_SCALES};
use crate::nn::ParamBuilder;
use crate::schedule::{NoiseSchedule, SamplingPlan};
use crate::util::bilinear_resize_tensor;

/// Per-term loss values of one training pass, detached for logging.
#[derive(Debug, Clone)]
pub struct TrainStats {
    pub total: f64,
    pub bce: [f64; NUM_SCALES],
    pub kld: [f64; NUM_SCALES],
    pub dd: [f64; NUM_SCALES],
}

/// Result of [`DiffAttnModel::train_forward`].
#[derive(Debug)]
pub struct TrainOutput {
    /// Scalar total loss, still attached to the graph.
    pub loss: Tensor,
    pub stats: TrainStats,
}

/// The complete saliency model.
pub struct DiffAttnModel {
    pb: ParamBuilder,
    encoder: Encoder,
    enhancer: Enhancer,
    ffp: FeatureFusionPyramid,
    conditioner: Conditioner,
    nets: Vec<ScaleUnet>,
    sched: NoiseSchedule,
}

impl DiffAttnModel {
    /// Builds every component in a fixed order so parameter names and init
    /// streams are stable for a given config and seed.
    pub fn new(cfg: &ModelSection, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let pb = ParamBuilder::new(seed, dtype, device);
        let encoder = Encoder::toy(&pb, cfg.base_channels)?;
        let enhancer = Self::build_enhancer(&pb, cfg)?;
        let ffp = FeatureFusionPyramid::new(&pb, cfg.base_channels)?;
        let conditioner = Conditioner::new(&pb, cfg.base_channels, cfg.cond_width)?;
        let nets = (0..NUM_SCALES)
            .map(|s| {
                ScaleUnet::new(
                    &pb.pp(&format!("unet{s}")),
                    cfg.cond_width,
                    cfg.unet_width,
                    cfg.time_steps,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let sched = NoiseSchedule::linear(cfg.time_steps, cfg.beta_min, cfg.beta_max)?;
        Ok(Self {
            pb,
            encoder,
            enhancer,
            ffp,
            conditioner,
            nets,
            sched,
        })
    }

    fn build_enhancer(pb: &ParamBuilder, cfg: &ModelSection) -> Result<Enhancer> {
        if cfg.enhance == EnhanceMode::Off {
            return Ok(Enhancer::disabled());
        }
        let d_model = 8 * cfg.base_channels;
        let proj = EnhanceProjections::new(pb, d_model, cfg.token_width, ProjInit::PseudoInverse)?;
        let layer = match cfg.enhance {
            EnhanceMode::Identity => SequenceLayer::identity(cfg.token_width),
            EnhanceMode::RandomFrozen => SequenceLayer::random(pb, cfg.token_width, false)?,
            EnhanceMode::RandomTrainable => SequenceLayer::random(pb, cfg.token_width, true)?,
            EnhanceMode::Checkpoint => {
                let path = cfg.enhance_checkpoint.as_ref().ok_or_else(|| {
                    Error::Config("enhance = \"checkpoint\" requires enhance_checkpoint".into())
                })?;
                SequenceLayer::from_checkpoint(pb, path, cfg.token_width, false)?
            }
            EnhanceMode::Off => unreachable!(),
        };
        Enhancer::new(proj, layer)
    }

    pub fn params(&self) -> &ParamBuilder {
        &self.pb
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn enhancer(&self) -> &Enhancer {
        &self.enhancer
    }

    pub fn fusion(&self) -> &FeatureFusionPyramid {
        &self.ffp
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.conditioner
    }

    pub fn nets(&self) -> &[ScaleUnet] {
        &self.nets
    }

    fn net_refs(&self) -> [&dyn NoisePredictor; NUM_SCALES] {
        [&self.nets[0], &self.nets[1], &self.nets[2], &self.nets[3]]
    }

    /// Encodes images into the fused pyramid (enhancement, when enabled,
    /// rewrites the deepest level before fusion).
    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let pyr = self.encoder.forward(images)?;
        let pyr = if self.enhancer.enabled() {
            let enhanced = self.enhancer.forward(pyr.level(3))?;
            pyr.with_level3(enhanced)?
        } else {
            pyr
        };
        self.ffp.forward(&pyr)
    }

    /// Samples saliency maps for a batch of images.
    pub fn infer(&self, images: &Tensor, plan: &SamplingPlan, seed: u64) -> Result<ScaleOutputs> {
        plan.validate_against(&self.sched)?;
        let fused = self.encode(images)?;
        decode_all_with_seeds(
            &self.conditioner,
            self.net_refs(),
            &fused,
            &self.sched,
            plan,
            [seed; NUM_SCALES],
        )
    }

    /// Like [`infer`](Self::infer), but additionally returns the finest
    /// scale's sigmoid-mapped latent entering every plan step, followed by
    /// the final clean map. The final map is bitwise identical to `infer`'s.
    pub fn infer_traced(
        &self,
        images: &Tensor,
        plan: &SamplingPlan,
        seed: u64,
    ) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
        plan.validate_against(&self.sched)?;
        let fused = self.encode(images)?;
        let mut coarser: Option<Tensor> = None;
        for s in (1..NUM_SCALES).rev() {
            let cond = self.conditioner.build(s, &fused, coarser.as_ref())?;
            coarser = Some(sample_scale(&self.nets[s], &cond, &self.sched, plan, seed)?);
        }
        let cond = self.conditioner.build(0, &fused, coarser.as_ref())?;
        sample_scale_traced(&self.nets[0], &cond, &self.sched, plan, seed)
    }

    /// Downsamples the full-resolution ground truth to every scale
    /// (index `s` has dimensions `(H >> s, W >> s)`).
    pub fn scale_ground_truth(&self, gt: &Tensor) -> Result<Vec<Tensor>> {
        let (_b, c, h, w) = gt.dims4().map_err(|_| {
            Error::Shape(format!(
                "ground truth must be (B,1,H,W), got {:?}",
                gt.shape()
            ))
        })?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "ground truth must have one channel, got {c}"
            )));
        }
        let mut gts = Vec::with_capacity(NUM_SCALES);
        for s in 0..NUM_SCALES {
            gts.push(if s == 0 {
                gt.clone()
            } else {
                bilinear_resize_tensor(gt, h >> s, w >> s)?
            });
        }
        Ok(gts)
    }

    /// One full training pass over a batch. `gt` is the `(B,1,H,W)`
    /// ground-truth saliency aligned with `images` `(B,3,H,W)`; `rng` drives
    /// the step indices and corruption noise.
    pub fn train_forward(
        &self,
        images: &Tensor,
        gt: &Tensor,
        weights: &LossWeights,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainOutput> {
        let (b, _, h, w) = images.dims4().map_err(|_| {
            Error::Shape(format!("images must be (B,3,H,W), got {:?}", images.shape()))
        })?;
        let gdims = gt.dims4().map_err(|_| {
            Error::Shape(format!(
                "ground truth must be (B,1,H,W), got {:?}",
                gt.shape()
            ))
        })?;
        if gdims != (b, 1, h, w) {
            return Err(Error::Shape(format!(
                "ground truth shape {gdims:?} does not match images ({b},1,{h},{w})"
            )));
        }
        let fused = self.encode(images)?;
        let gts = self.scale_ground_truth(gt)?;
        let latents = prepare_latents(&gts, &self.sched, rng)?;
        let mut terms = Vec::with_capacity(NUM_SCALES);
        let mut coarser: Option<Tensor> = None;
        for s in (0..NUM_SCALES).rev() {
            let cond = self.conditioner.build(s, &fused, coarser.as_ref())?;
            let lat = &latents[s];
            let eps_hat = self.nets[s].predict(&lat.noisy, &lat.taus, &cond)?;
            let estimate = training_estimate(&self.sched, lat, &eps_hat)?;
            terms.push(scale_terms(&estimate, gt, &lat.eps, &eps_hat)?);
            coarser = Some(estimate);
        }
        terms.reverse();
        let loss = total_loss(&terms, weights)?;
        let scalar = |t: &Tensor| -> Result<f64> {
            Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
        };
        let mut stats = TrainStats {
            total: scalar(&loss)?,
            bce: [0.0; NUM_SCALES],
            kld: [0.0; NUM_SCALES],
            dd: [0.0; NUM_SCALES],
        };
        for (s, t) in terms.iter().enumerate() {
            stats.bce[s] = scalar(&t.bce)?;
            stats.kld[s] = scalar(&t.kld)?;
            stats.dd[s] = scalar(&t.dd)?;
        }
        Ok(TrainOutput { loss, stats })
    }
}
