//! Hierarchical image encoders emitting a four-level feature pyramid.
//!
//! Contract: for input `(B, 3, H, W)` with `H, W` divisible by 32, level `i`
//! of the pyramid has `C_e * 2^i` channels at stride `4 * 2^i` (strides 4, 8,
//! 16, 32). Two interchangeable backbones produce it:
//!
//! - [`ToyBackbone`]: a small trainable convolutional hierarchy (strided
//!   patch-merge + residual mixing block per stage) for desk-scale work;
//! - [`PyramidAdapter`]: wraps an opaque pretrained feature extractor and
//!   enforces the same contract on its outputs.
//!
//! The heavy pretrained backbone the full-scale system uses is deliberately
//! out of scope; everything downstream depends only on the contract.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2dConfig, GroupNorm};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};

/// Four feature volumes with doubling channels and halving resolution.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
    base_channels: usize,
}

impl FeaturePyramid {
    /// Validates the channel/stride contract for input size `(h, w)`.
    pub fn new(levels: Vec<Tensor>, base_channels: usize, h: usize, w: usize) -> Result<Self> {
        if levels.len() != 4 {
            return Err(Error::Contract(format!(
                "feature pyramid needs exactly 4 levels, got {}",
                levels.len()
            )));
        }
        let batch = levels[0].dims4().map(|d| d.0).map_err(|_| {
            Error::Contract(format!(
                "pyramid level 0 must be NCHW, got shape {:?}",
                levels[0].shape()
            ))
        })?;
        for (i, level) in levels.iter().enumerate() {
            let stride = 4 << i;
            let expect = (batch, base_channels << i, h / stride, w / stride);
            let got = level.dims4().map_err(|_| {
                Error::Contract(format!(
                    "pyramid level {i} must be NCHW, got shape {:?}",
                    level.shape()
                ))
            })?;
            if got != expect {
                return Err(Error::Contract(format!(
                    "pyramid level {i} violates the shape contract: expected \
                     (B,C,H,W) = {expect:?}, got {got:?}"
                )));
            }
        }
        Ok(Self {
            levels,
            base_channels,
        })
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    /// Replaces the deepest level (used to splice in enhanced features);
    /// the replacement must keep the level-3 shape.
    pub fn with_level3(mut self, level3: Tensor) -> Result<Self> {
        if level3.shape() != self.levels[3].shape() {
            return Err(Error::Contract(format!(
                "level-3 replacement changes shape: {:?} vs {:?}",
                level3.shape(),
                self.levels[3].shape()
            )));
        }
        self.levels[3] = level3;
        Ok(self)
    }
}

/// Residual mixing block: `x + conv(elu(norm(conv(elu(norm(x))))))`.
#[derive(Debug)]
struct MixBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl MixBlock {
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

/// One encoder stage: strided patch-merge convolution plus a mixing block.
#[derive(Debug)]
struct Stage {
    merge: Conv2d,
    block: MixBlock,
}

/// Small trainable hierarchy satisfying the pyramid contract.
#[derive(Debug)]
pub struct ToyBackbone {
    stages: Vec<Stage>,
    base_channels: usize,
}

impl ToyBackbone {
    pub fn new(pb: &ParamBuilder, base_channels: usize) -> Result<Self> {
        if base_channels == 0 || base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "encoder base channel count must be even and positive, got {base_channels}"
            )));
        }
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let scope = pb.pp(&format!("stage{i}"));
            let (in_c, out_c, k, stride) = if i == 0 {
                (3, base_channels, 4, 4)
            } else {
                let c = base_channels << (i - 1);
                (c, c * 2, 2, 2)
            };
            let merge = scope.conv2d(
                "merge",
                in_c,
                out_c,
                k,
                Conv2dConfig {
                    stride,
                    ..Default::default()
                },
            )?;
            let block = MixBlock::new(&scope.pp("block"), out_c)?;
            stages.push(Stage { merge, block });
        }
        Ok(Self {
            stages,
            base_channels,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut levels = Vec::with_capacity(4);
        let mut h = x.clone();
        for stage in &self.stages {
            h = stage.block.forward(&stage.merge.forward(&h)?)?;
            levels.push(h.clone());
        }
        Ok(levels)
    }
}

type AdapterFn = Box<dyn Fn(&Tensor) -> Result<Vec<Tensor>>>;

/// Wraps an opaque pretrained feature extractor. The callable's outputs are
/// validated against the pyramid contract on every call; its weights are
/// outside the trainable registry and therefore read-only.
pub struct PyramidAdapter {
    base_channels: usize,
    /// Optional per-channel `(mean, std)` input normalization.
    normalize: Option<([f64; 3], [f64; 3])>,
    f: AdapterFn,
}

impl PyramidAdapter {
    pub fn new(
        base_channels: usize,
        normalize: Option<([f64; 3], [f64; 3])>,
        f: AdapterFn,
    ) -> Self {
        Self {
            base_channels,
            normalize,
            f,
        }
    }
}

/// Backbone selector.
pub enum Encoder {
    Toy(ToyBackbone),
    Adapter(PyramidAdapter),
}

impl Encoder {
    pub fn toy(pb: &ParamBuilder, base_channels: usize) -> Result<Self> {
        Ok(Encoder::Toy(ToyBackbone::new(
            &pb.pp("encoder"),
            base_channels,
        )?))
    }

    pub fn base_channels(&self) -> usize {
        match self {
            Encoder::Toy(t) => t.base_channels,
            Encoder::Adapter(a) => a.base_channels,
        }
    }

    /// Encodes a `(B, 3, H, W)` image batch into the feature pyramid.
    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4().map_err(|_| {
            Error::Shape(format!(
                "encoder expects NCHW input, got shape {:?}",
                image.shape()
            ))
        })?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "encoder expects 3 input channels, got {c}"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "encoder input size must be divisible by 32, got {h}x{w}"
            )));
        }
        let levels = match self {
            Encoder::Toy(t) => t.forward(image)?,
            Encoder::Adapter(a) => {
                let x = match a.normalize {
                    Some((mean, std)) => {
                        let dev = image.device();
                        let dt = image.dtype();
                        let m = Tensor::from_vec(mean.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dt)?;
                        let s = Tensor::from_vec(std.to_vec(), (1, 3, 1, 1), dev)?.to_dtype(dt)?;
                        image.broadcast_sub(&m)?.broadcast_div(&s)?
                    }
                    None => image.clone(),
                };
                (a.f)(&x)?
            }
        };
        FeaturePyramid::new(levels, self.base_channels(), h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use crate::util::{derive_rng, standard_normal_tensor, tensor_to_f64_vec};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn toy_pyramid_shapes_at_64() {
        let pb = ParamBuilder::new(0, DType::F32, &dev());
        let enc = Encoder::toy(&pb, 16).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &dev()).unwrap();
        let pyr = enc.forward(&x).unwrap();
        assert_eq!(pyr.level(0).dims(), [2, 16, 16, 16]);
        assert_eq!(pyr.level(1).dims(), [2, 32, 8, 8]);
        assert_eq!(pyr.level(2).dims(), [2, 64, 4, 4]);
        assert_eq!(pyr.level(3).dims(), [2, 128, 2, 2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let pb = ParamBuilder::new(0, DType::F32, &dev());
        let enc = Encoder::toy(&pb, 16).unwrap();
        let odd = Tensor::zeros((1, 3, 48, 64), DType::F32, &dev()).unwrap();
        assert_eq!(enc.forward(&odd).unwrap_err().category(), "shape");
        let grey = Tensor::zeros((1, 1, 64, 64), DType::F32, &dev()).unwrap();
        assert_eq!(enc.forward(&grey).unwrap_err().category(), "shape");
        let rank3 = Tensor::zeros((3, 64, 64), DType::F32, &dev()).unwrap();
        assert_eq!(enc.forward(&rank3).unwrap_err().category(), "shape");
    }

    #[test]
    fn forward_is_deterministic() {
        let pb = ParamBuilder::new(5, DType::F32, &dev());
        let enc = Encoder::toy(&pb, 8).unwrap();
        let mut rng = derive_rng(1, 400);
        let x = standard_normal_tensor(&mut rng, &[1, 3, 64, 64], DType::F32, &dev()).unwrap();
        let a = enc.forward(&x).unwrap();
        let b = enc.forward(&x).unwrap();
        for i in 0..4 {
            let av = tensor_to_f64_vec(a.level(i)).unwrap();
            let bv = tensor_to_f64_vec(b.level(i)).unwrap();
            assert_eq!(av, bv);
        }
    }

    #[test]
    fn every_toy_parameter_receives_gradient() {
        let pb = ParamBuilder::new(7, DType::F32, &dev());
        let enc = Encoder::toy(&pb, 8).unwrap();
        let mut rng = derive_rng(2, 401);
        let x = standard_normal_tensor(&mut rng, &[1, 3, 64, 64], DType::F32, &dev()).unwrap();
        let pyr = enc.forward(&x).unwrap();
        // Random projection of all four levels so no channel is ignored.
        let mut loss: Option<Tensor> = None;
        for level in pyr.levels() {
            let r = standard_normal_tensor(&mut rng, level.dims(), DType::F32, &dev()).unwrap();
            let term = (level * &r).unwrap().sum_all().unwrap();
            loss = Some(match loss {
                None => term,
                Some(l) => (l + term).unwrap(),
            });
        }
        let grads = loss.unwrap().backward().unwrap();
        for (name, var) in pb.named_vars() {
            let g = grads
                .get(var.as_tensor())
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            let max = tensor_to_f64_vec(g)
                .unwrap()
                .into_iter()
                .map(f64::abs)
                .fold(0.0, f64::max);
            assert!(max > 0.0, "zero gradient for {name}");
        }
    }

    #[test]
    fn adapter_validates_contract_with_level_in_message() {
        let base = 8;
        let good = move |x: &Tensor| -> Result<Vec<Tensor>> {
            let (b, _, h, w) = x.dims4()?;
            let mut out = Vec::new();
            for i in 0..4 {
                let stride = 4 << i;
                out.push(Tensor::zeros(
                    (b, base << i, h / stride, w / stride),
                    x.dtype(),
                    x.device(),
                )?);
            }
            Ok(out)
        };
        let enc = Encoder::Adapter(PyramidAdapter::new(base, None, Box::new(good)));
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &dev()).unwrap();
        assert!(enc.forward(&x).is_ok());

        let bad = move |x: &Tensor| -> Result<Vec<Tensor>> {
            let (b, _, h, w) = x.dims4()?;
            let mut out = Vec::new();
            for i in 0..4 {
                let stride = 4 << i;
                // Wrong channel count at level 2.
                let c = if i == 2 { 7 } else { base << i };
                out.push(Tensor::zeros((b, c, h / stride, w / stride), x.dtype(), x.device())?);
            }
            Ok(out)
        };
        let enc = Encoder::Adapter(PyramidAdapter::new(base, None, Box::new(bad)));
        let err = enc.forward(&x).unwrap_err();
        assert_eq!(err.category(), "contract");
        let msg = err.to_string();
        assert!(msg.contains("level 2"), "message: {msg}");
        assert!(msg.contains("32"), "expected channel count in message: {msg}");
    }

    #[test]
    fn adapter_normalization_is_applied() {
        // The adapter sees (x - mean) / std; with a passthrough probe we can
        // observe the normalized values directly.
        let probe = |x: &Tensor| -> Result<Vec<Tensor>> {
            let (b, _, h, w) = x.dims4()?;
            let v = x.mean_all()?.to_scalar::<f32>()?;
            let mut out = Vec::new();
            for i in 0..4 {
                let stride = 4 << i;
                out.push(Tensor::full(
                    v,
                    (b, 4 << i, h / stride, w / stride),
                    x.device(),
                )?);
            }
            Ok(out)
        };
        let enc = Encoder::Adapter(PyramidAdapter::new(
            4,
            Some(([0.5, 0.5, 0.5], [0.25, 0.25, 0.25])),
            Box::new(probe),
        ));
        let x = Tensor::full(1.0f32, (1, 3, 32, 32), &dev()).unwrap();
        let pyr = enc.forward(&x).unwrap();
        let v = tensor_to_f64_vec(pyr.level(0)).unwrap()[0];
        assert!((v - 2.0).abs() < 1e-6, "(1 - 0.5)/0.25 = 2, got {v}");
    }

    #[test]
    fn with_level3_enforces_shape() {
        let pb = ParamBuilder::new(0, DType::F32, &dev());
        let enc = Encoder::toy(&pb, 8).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &dev()).unwrap();
        let pyr = enc.forward(&x).unwrap();
        let bad = Tensor::zeros((1, 32, 2, 2), DType::F32, &dev()).unwrap();
        assert_eq!(pyr.clone().with_level3(bad).unwrap_err().category(), "contract");
        let same = pyr.level(3).clone();
        assert!(pyr.with_level3(same).is_ok());
    }

    #[test]
    fn gradient_reaches_input_image() {
        let pb = ParamBuilder::new(3, DType::F32, &dev());
        let enc = Encoder::toy(&pb, 8).unwrap();
        let mut rng = derive_rng(4, 402);
        let x = standard_normal_tensor(&mut rng, &[1, 3, 64, 64], DType::F32, &dev()).unwrap();
        let xv = Var::from_tensor(&x).unwrap();
        let pyr = enc.forward(xv.as_tensor()).unwrap();
        let loss = pyr.level(3).sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(xv.as_tensor()).expect("input gradient");
        let max = tensor_to_f64_vec(g)
            .unwrap()
            .into_iter()
            .map(f64::abs)
            .fold(0.0, f64::max);
        assert!(max > 0.0);
    }
}
