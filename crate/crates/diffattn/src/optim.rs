//! AdamW over the trainable parameters: Adam moments with decoupled weight
//! decay, plus exact state export/import so an interrupted run resumes
//! bit-for-bit.
//!
//! The optimizer is name-driven: callers pass `(name, Var)` pairs each step
//! and moments are keyed by name, which is what lets a checkpoint restore
//! state onto a freshly built model.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::OptimizerSection;
use crate::error::{Error, Result};

/// Hyperparameters of one optimizer instance.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn from_section(s: &OptimizerSection) -> Result<Self> {
        if s.kind != "adamw" {
            return Err(Error::Config(format!(
                "optimizer.kind must be \"adamw\", got \"{}\"",
                s.kind
            )));
        }
        Ok(Self {
            learning_rate: s.learning_rate,
            weight_decay: s.weight_decay,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
        })
    }
}

/// Decoupled-weight-decay Adam with per-parameter moment state.
pub struct AdamW {
    cfg: AdamWConfig,
    /// Completed optimizer steps (drives bias correction).
    t: usize,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// Applies one update to every listed parameter. A parameter without a
    /// gradient in `grads` is treated as having a zero gradient, so weight
    /// decay still applies.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (name, var) in params {
            let theta = var.as_tensor();
            let g = match grads.get(theta) {
                Some(g) => g.clone(),
                None => theta.zeros_like()?,
            };
            if g.shape() != theta.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    g.shape(),
                    theta.shape()
                )));
            }
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => theta.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => theta.zeros_like()?,
            };
            let m_new = ((m_prev * self.cfg.beta1)? + (&g * (1.0 - self.cfg.beta1))?)?;
            let v_new = ((v_prev * self.cfg.beta2)? + (g.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let m_hat = m_new.affine(1.0 / bc1, 0.0)?;
            let v_hat = v_new.affine(1.0 / bc2, 0.0)?;
            let denom = v_hat.sqrt()?.affine(1.0, self.cfg.eps)?;
            let update = (m_hat / denom)?;
            let decayed = theta.affine(1.0 - self.cfg.learning_rate * self.cfg.weight_decay, 0.0)?;
            let next = (decayed - (update * self.cfg.learning_rate)?)?;
            var.set(&next.detach())?;
            self.m.insert(name.clone(), m_new.detach());
            self.v.insert(name.clone(), v_new.detach());
        }
        Ok(())
    }

    /// Moment tensors keyed `m::<param>` / `v::<param>` (the step count
    /// travels separately).
    pub fn export_state(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m::{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v::{k}"), t.clone());
        }
        out
    }

    /// Restores moments and step count captured by [`export_state`]
    /// (Self::export_state). Replaces any existing state.
    pub fn import_state(&mut self, step: usize, state: HashMap<String, Tensor>) -> Result<()> {
        let mut m = HashMap::new();
        let mut v = HashMap::new();
        for (k, t) in state {
            if let Some(name) = k.strip_prefix("m::") {
                m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v::") {
                v.insert(name.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!(
                    "unrecognized optimizer state key '{k}'"
                )));
            }
        }
        let mut mk: Vec<_> = m.keys().cloned().collect();
        let mut vk: Vec<_> = v.keys().cloned().collect();
        mk.sort();
        vk.sort();
        if mk != vk {
            return Err(Error::Checkpoint(
                "optimizer state has mismatched first/second moment keys".into(),
            ));
        }
        self.t = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
