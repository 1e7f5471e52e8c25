//! Deterministic layer construction on top of a shared variable registry.
//!
//! The tensor backend's device RNG cannot be seeded on CPU, so parameter
//! initialization never touches it: every weight is drawn host-side from a
//! ChaCha stream owned by the builder and registered as a named [`Var`] in a
//! [`VarMap`]. Construction order is fixed by the model code, which makes
//! initialization a pure function of the seed (per dtype/device).
//!
//! Frozen parameters live in the same registry (so they checkpoint and
//! restore uniformly) but are excluded from [`ParamBuilder::trainable_vars`],
//! which is what the optimizer consumes.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2dConfig, GroupNorm, Linear, VarMap};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::{derive_rng, param_checksum, standard_normal_vec};

/// Initialization scheme for a new parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    /// Normal with an explicit standard deviation.
    NormalStd(f64),
}

struct Registry {
    varmap: VarMap,
    frozen: RefCell<BTreeSet<String>>,
    rng: RefCell<ChaCha8Rng>,
    device: Device,
    dtype: DType,
}

/// 2-D convolution layer (NCHW, groups = 1).
///
/// Wraps the weight/bias pair instead of using the backend layer directly
/// because the backend's CPU forward misreads a contiguous NCHW input as
/// channels-last whenever the two stride tuples coincide — that is, on square
/// inputs whose side length equals the channel count — and silently returns
/// wrong values. [`Conv2d::forward`] detects the ambiguous stride pattern and
/// re-strides the input through a pad-and-narrow pair, which preserves values
/// and gradients while forcing the backend onto its layout-aware path.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    cfg: Conv2dConfig,
}

impl Conv2d {
    fn from_parts(weight: Tensor, bias: Tensor, cfg: Conv2dConfig) -> Self {
        Self { weight, bias, cfg }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_b, c, h, w) = x.dims4()?;
        let (out_c, _in_c, k_h, k_w) = self.weight.dims4()?;
        // The 1x1/stride-1/no-padding case takes a dedicated stride-aware
        // backend kernel and needs no workaround.
        let pointwise =
            k_h == 1 && k_w == 1 && self.cfg.stride == 1 && self.cfg.padding == 0;
        let ambiguous = x.stride() == [h * w * c, w * c, c, 1];
        let x = if ambiguous && !pointwise {
            x.pad_with_zeros(3, 0, 1)?.narrow(3, 0, w)?
        } else {
            x.clone()
        };
        let y = x.conv2d(
            &self.weight,
            self.cfg.padding,
            self.cfg.stride,
            self.cfg.dilation,
            self.cfg.groups,
        )?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_c, 1, 1))?)?)
    }
}

/// Scoped handle for creating named parameters; cheap to clone. `pp` extends
/// the name prefix, `frozen` marks subsequently created parameters as
/// non-trainable.
#[derive(Clone)]
pub struct ParamBuilder {
    inner: Rc<Registry>,
    prefix: String,
    frozen: bool,
}

impl ParamBuilder {
    /// Fresh registry; all parameters derive from `seed`.
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Rc::new(Registry {
                varmap: VarMap::new(),
                frozen: RefCell::new(BTreeSet::new()),
                rng: RefCell::new(derive_rng(seed, 0x7061_7261_6d73)),
                device: device.clone(),
                dtype,
            }),
            prefix: String::new(),
            frozen: false,
        }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn pp(&self, name: &str) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            inner: Rc::clone(&self.inner),
            prefix,
            frozen: self.frozen,
        }
    }

    /// Builder that registers parameters as frozen (excluded from training).
    pub fn frozen(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    /// Full dotted prefix of this scope ("" at the root).
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Creates and registers a parameter; duplicate names are wiring bugs.
    pub fn take(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let n: usize = shape.iter().product();
        let host: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                standard_normal_vec(&mut self.inner.rng.borrow_mut(), n)
                    .into_iter()
                    .map(|v| v * std)
                    .collect()
            }
            Init::NormalStd(std) => standard_normal_vec(&mut self.inner.rng.borrow_mut(), n)
                .into_iter()
                .map(|v| v * std)
                .collect(),
        };
        let t = Tensor::from_vec(host, shape, &self.inner.device)?.to_dtype(self.inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let mut map = self.inner.varmap.data().lock().expect("varmap lock");
        if map.contains_key(&full) {
            return Err(Error::Contract(format!(
                "parameter '{full}' registered twice"
            )));
        }
        map.insert(full.clone(), var);
        drop(map);
        if self.frozen {
            self.inner.frozen.borrow_mut().insert(full);
        }
        Ok(out)
    }

    /// Registers a parameter with an externally supplied initial value
    /// (pseudo-inverse inits, weights imported from a checkpoint, ...).
    pub fn take_tensor(&self, name: &str, value: &Tensor) -> Result<Tensor> {
        let full = self.full_name(name);
        let t = value.to_device(&self.inner.device)?.to_dtype(self.inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let mut map = self.inner.varmap.data().lock().expect("varmap lock");
        if map.contains_key(&full) {
            return Err(Error::Contract(format!(
                "parameter '{full}' registered twice"
            )));
        }
        map.insert(full.clone(), var);
        drop(map);
        if self.frozen {
            self.inner.frozen.borrow_mut().insert(full);
        }
        Ok(out)
    }

    /// 2-D convolution; Kaiming-normal weight, zero bias.
    pub fn conv2d(
        &self,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        cfg: Conv2dConfig,
    ) -> Result<Conv2d> {
        let scope = self.pp(name);
        let weight = scope.take(
            "weight",
            &[out_c, in_c, kernel, kernel],
            Init::KaimingNormal {
                fan_in: in_c * kernel * kernel,
            },
        )?;
        let bias = scope.take("bias", &[out_c], Init::Zeros)?;
        Ok(Conv2d::from_parts(weight, bias, cfg))
    }

    /// Convolution with zero-initialized weight and bias; used as the final
    /// projection so an untrained network predicts zero noise.
    pub fn conv2d_zero(
        &self,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        cfg: Conv2dConfig,
    ) -> Result<Conv2d> {
        let scope = self.pp(name);
        let weight = scope.take("weight", &[out_c, in_c, kernel, kernel], Init::Zeros)?;
        let bias = scope.take("bias", &[out_c], Init::Zeros)?;
        Ok(Conv2d::from_parts(weight, bias, cfg))
    }

    /// Fully connected layer; Kaiming-normal weight, zero bias.
    pub fn linear(&self, name: &str, in_f: usize, out_f: usize) -> Result<Linear> {
        let scope = self.pp(name);
        let weight = scope.take("weight", &[out_f, in_f], Init::KaimingNormal { fan_in: in_f })?;
        let bias = scope.take("bias", &[out_f], Init::Zeros)?;
        Ok(Linear::new(weight, Some(bias)))
    }

    /// Group normalization with unit weight and zero bias; group count is the
    /// largest of {8, 4, 2, 1} dividing the channel count.
    pub fn group_norm(&self, name: &str, channels: usize) -> Result<GroupNorm> {
        let scope = self.pp(name);
        let weight = scope.take("weight", &[channels], Init::Ones)?;
        let bias = scope.take("bias", &[channels], Init::Zeros)?;
        Ok(GroupNorm::new(weight, bias, channels, norm_groups(channels), 1e-5)?)
    }

    /// All `(name, var)` pairs, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let map = self.inner.varmap.data().lock().expect("varmap lock");
        let mut out: Vec<(String, Var)> =
            map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Trainable `(name, var)` pairs (frozen parameters excluded), sorted.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let frozen = self.inner.frozen.borrow();
        self.named_vars()
            .into_iter()
            .filter(|(name, _)| !frozen.contains(name))
            .collect()
    }

    /// Names registered as frozen, sorted.
    pub fn frozen_names(&self) -> Vec<String> {
        self.inner.frozen.borrow().iter().cloned().collect()
    }

    /// Underlying variable store (for safetensors save/load).
    pub fn varmap(&self) -> VarMap {
        self.inner.varmap.clone()
    }

    /// Checksum over parameters whose full name satisfies `filter`.
    pub fn checksum_where(&self, filter: impl Fn(&str) -> bool) -> Result<String> {
        let named: Vec<(String, Tensor)> = self
            .named_vars()
            .into_iter()
            .filter(|(name, _)| filter(name))
            .map(|(name, var)| (name, var.as_tensor().clone()))
            .collect();
        param_checksum(&named)
    }

    /// Checksum over every parameter.
    pub fn checksum(&self) -> Result<String> {
        self.checksum_where(|_| true)
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.named_vars()
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }
}

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    for g in [8, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}
