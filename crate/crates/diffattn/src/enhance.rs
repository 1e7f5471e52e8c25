//! Deepest-level semantic enhancement: level-3 features become a token
//! sequence (one token per spatial position, channels as features), get
//! projected into a frozen sequence layer's width, pass through that layer,
//! and are projected back and reshaped.
//!
//! The sequence layer is pluggable: an identity stub and a random layer are
//! built in so everything runs offline; weights exported from a real language
//! model can be spliced in through the safetensors adapter. Projections are
//! always trainable; the layer itself is frozen unless configured otherwise.

use std::path::Path;

use candle_core::{Module, Tensor, Var};
use candle_nn::Linear;

use crate::error::{Error, Result};
use crate::nn::{Init, ParamBuilder};
use crate::util::{param_checksum, standard_normal_vec};

/// Where the sequence layer's weights came from; checked by freeze tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerProvenance {
    IdentityStub,
    RandomFrozen,
    PretrainedFrozen,
    PretrainedTrainable,
}

#[derive(Debug)]
enum LayerBody {
    Identity,
    /// Residual token-wise MLP: `x + fc2(elu(fc1(x)))`.
    Mlp { fc1: Linear, fc2: Linear },
}

/// Shape-preserving map over `(B, N, D)` token batches.
#[derive(Debug)]
pub struct SequenceLayer {
    body: LayerBody,
    provenance: LayerProvenance,
    width: usize,
    trainable: bool,
    vars: Vec<(String, Var)>,
}

impl SequenceLayer {
    /// Parameterless stub; forwards tokens unchanged.
    pub fn identity(width: usize) -> Self {
        Self {
            body: LayerBody::Identity,
            provenance: LayerProvenance::IdentityStub,
            width,
            trainable: false,
            vars: Vec::new(),
        }
    }

    /// Randomly initialized residual MLP, frozen by default.
    pub fn random(pb: &ParamBuilder, width: usize, trainable: bool) -> Result<Self> {
        let scope = pb.pp("llm_layer");
        let scope = if trainable { scope } else { scope.frozen() };
        let fc1 = scope.linear("fc1", width, width)?;
        let fc2 = scope.linear("fc2", width, width)?;
        let vars = scoped_vars(pb, scope.prefix());
        Ok(Self {
            body: LayerBody::Mlp { fc1, fc2 },
            provenance: if trainable {
                LayerProvenance::PretrainedTrainable
            } else {
                LayerProvenance::RandomFrozen
            },
            width,
            trainable,
            vars,
        })
    }

    /// Imports layer weights from a safetensors file holding
    /// `fc1.weight/fc1.bias/fc2.weight/fc2.bias`, each `(width, width)` /
    /// `(width,)`.
    pub fn from_checkpoint(
        pb: &ParamBuilder,
        path: &Path,
        width: usize,
        trainable: bool,
    ) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, pb.device()).map_err(|e| {
            Error::Checkpoint(format!(
                "cannot read sequence layer from {}: {e}",
                path.display()
            ))
        })?;
        let scope = pb.pp("llm_layer");
        let scope = if trainable { scope } else { scope.frozen() };
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "sequence layer checkpoint {} lacks tensor '{name}'",
                    path.display()
                ))
            })?;
            if t.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "sequence layer tensor '{name}' has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            scope.take_tensor(name, t)
        };
        let w1 = fetch("fc1.weight", &[width, width])?;
        let b1 = fetch("fc1.bias", &[width])?;
        let w2 = fetch("fc2.weight", &[width, width])?;
        let b2 = fetch("fc2.bias", &[width])?;
        let vars = scoped_vars(pb, scope.prefix());
        Ok(Self {
            body: LayerBody::Mlp {
                fc1: Linear::new(w1, Some(b1)),
                fc2: Linear::new(w2, Some(b2)),
            },
            provenance: if trainable {
                LayerProvenance::PretrainedTrainable
            } else {
                LayerProvenance::PretrainedFrozen
            },
            width,
            trainable,
            vars,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn provenance(&self) -> LayerProvenance {
        self.provenance
    }

    /// Content hash of the layer's parameters; the identity stub hashes an
    /// empty set, giving a constant sentinel.
    pub fn checksum(&self) -> Result<String> {
        let pairs: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        param_checksum(&pairs)
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, _, d) = tokens.dims3().map_err(|_| {
            Error::Shape(format!(
                "sequence layer expects (B, N, D) tokens, got {:?}",
                tokens.shape()
            ))
        })?;
        if d != self.width {
            return Err(Error::Shape(format!(
                "sequence layer width is {}, tokens have {d}",
                self.width
            )));
        }
        match &self.body {
            LayerBody::Identity => Ok(tokens.clone()),
            LayerBody::Mlp { fc1, fc2 } => {
                let h = fc2.forward(&fc1.forward(tokens)?.elu(1.0)?)?;
                Ok((tokens + h)?)
            }
        }
    }
}

fn scoped_vars(pb: &ParamBuilder, prefix: &str) -> Vec<(String, Var)> {
    pb.named_vars()
        .into_iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .collect()
}

/// How to initialize the projection pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjInit {
    /// Kaiming-normal weights (training default).
    Kaiming,
    /// Orthonormal forward map with its transpose as the return map, so the
    /// round trip is the identity at initialization.
    PseudoInverse,
}

/// Trainable linear maps into and out of the sequence layer's width.
#[derive(Debug)]
pub struct EnhanceProjections {
    phi: Linear,
    psi: Linear,
    d_model: usize,
    d_llm: usize,
}

impl EnhanceProjections {
    pub fn new(
        pb: &ParamBuilder,
        d_model: usize,
        d_llm: usize,
        init: ProjInit,
    ) -> Result<Self> {
        let scope = pb.pp("enhance");
        let (phi, psi) = match init {
            ProjInit::Kaiming => (
                scope.linear("phi", d_model, d_llm)?,
                scope.linear("psi", d_llm, d_model)?,
            ),
            ProjInit::PseudoInverse => {
                if d_llm < d_model {
                    return Err(Error::Config(format!(
                        "pseudo-inverse init needs the layer width ({d_llm}) to be \
                         at least the feature width ({d_model})"
                    )));
                }
                let w = orthonormal_columns(pb, d_llm, d_model)?;
                let wt = transpose_host(&w, d_llm, d_model);
                let dev = pb.device();
                let phi_w = Tensor::from_vec(w, (d_llm, d_model), dev)?;
                let psi_w = Tensor::from_vec(wt, (d_model, d_llm), dev)?;
                let phi_w = scope.take_tensor("phi.weight", &phi_w)?;
                let phi_b = scope.take("phi.bias", &[d_llm], Init::Zeros)?;
                let psi_w = scope.take_tensor("psi.weight", &psi_w)?;
                let psi_b = scope.take("psi.bias", &[d_model], Init::Zeros)?;
                (
                    Linear::new(phi_w, Some(phi_b)),
                    Linear::new(psi_w, Some(psi_b)),
                )
            }
        };
        Ok(Self {
            phi,
            psi,
            d_model,
            d_llm,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_llm(&self) -> usize {
        self.d_llm
    }
}

/// Row-major `(rows, cols)` matrix whose columns are orthonormal
/// (modified Gram-Schmidt on Gaussian draws).
fn orthonormal_columns(pb: &ParamBuilder, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut rng = crate::util::derive_rng(0x70_69_6e_76, rows as u64 * 31 + cols as u64);
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|_| standard_normal_vec(&mut rng, rows))
        .collect();
    let _ = pb; // reserved: draws are independent of the builder's stream
    for j in 0..cols {
        for k in 0..j {
            let dot: f64 = (0..rows).map(|r| columns[j][r] * columns[k][r]).sum();
            for r in 0..rows {
                columns[j][r] -= dot * columns[k][r];
            }
        }
        let norm: f64 = (0..rows)
            .map(|r| columns[j][r] * columns[j][r])
            .sum::<f64>()
            .sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(
                "degenerate draw during orthonormal initialization".into(),
            ));
        }
        for r in 0..rows {
            columns[j][r] /= norm;
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for r in 0..rows {
            out[r * cols + j] = col[r];
        }
    }
    Ok(out)
}

fn transpose_host(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Flattens `(B, C, h, w)` into `(B, h*w, C)` tokens, row-major over `(h, w)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = tokens.dims3()?;
    if n != h * w {
        return Err(Error::Shape(format!(
            "token count {n} does not match spatial size {h}x{w}"
        )));
    }
    Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// The complete enhancement stage. Disabled instances carry no parameters
/// and forward features unchanged.
#[derive(Debug)]
pub struct Enhancer {
    inner: Option<(EnhanceProjections, SequenceLayer)>,
}

impl Enhancer {
    pub fn disabled() -> Self {
        Self { inner: None }
    }

    pub fn new(proj: EnhanceProjections, layer: SequenceLayer) -> Result<Self> {
        if proj.d_llm() != layer.width() {
            return Err(Error::Config(format!(
                "projection width {} does not match sequence layer width {}",
                proj.d_llm(),
                layer.width()
            )));
        }
        Ok(Self {
            inner: Some((proj, layer)),
        })
    }

    pub fn enabled(&self) -> bool {
        self.inner.is_some()
    }

    pub fn layer(&self) -> Option<&SequenceLayer> {
        self.inner.as_ref().map(|(_, l)| l)
    }

    /// Enhances a level-3 feature volume, preserving its shape.
    pub fn forward(&self, x3: &Tensor) -> Result<Tensor> {
        let Some((proj, layer)) = &self.inner else {
            return Ok(x3.clone());
        };
        let (_, c, h, w) = x3.dims4().map_err(|_| {
            Error::Shape(format!(
                "enhancement expects an NCHW feature volume, got {:?}",
                x3.shape()
            ))
        })?;
        if c != proj.d_model() {
            return Err(Error::Shape(format!(
                "enhancement built for {} channels, got {c}",
                proj.d_model()
            )));
        }
        let tokens = to_tokens(x3)?;
        let projected = proj.phi.forward(&tokens)?;
        let transformed = layer.forward(&projected)?;
        let returned = proj.psi.forward(&transformed)?;
        from_tokens(&returned, h, w)
    }
}
