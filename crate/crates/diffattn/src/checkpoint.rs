//! Checkpoint directories: `model.safetensors` (every parameter by its
//! registry name), `optim.safetensors` (AdamW moments), and `meta.toml`
//! (format version, architecture fingerprint, step counter, and the full
//! config snapshot).
//!
//! Loading restores tensors bit-for-bit onto a freshly built model and
//! refuses checkpoints whose format version or architecture fingerprint does
//! not match. Saving refuses non-finite parameters so a crashed run can
//! always restart from its last checkpoint.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::DiffAttnModel;
use crate::optim::AdamW;
use crate::util::tensor_to_f64_vec;

pub const FORMAT_VERSION: u32 = 1;

const MODEL_FILE: &str = "model.safetensors";
const OPTIM_FILE: &str = "optim.safetensors";
const META_FILE: &str = "meta.toml";

/// Sidecar metadata stored next to the tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch_fingerprint: String,
    /// Optimizer steps completed when the checkpoint was written.
    pub step: usize,
    pub config: ExperimentConfig,
}

/// Writes a complete checkpoint directory, creating it if needed.
pub fn save(
    dir: &Path,
    model: &DiffAttnModel,
    opt: &AdamW,
    cfg: &ExperimentConfig,
    step: usize,
) -> Result<()> {
    // Refuse to persist a poisoned model: a checkpoint must always be a
    // valid restart point.
    for (name, var) in model.params().named_vars() {
        let vals = tensor_to_f64_vec(var.as_tensor())?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameter '{name}' contains non-finite values; refusing to checkpoint"
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for (name, var) in model.params().named_vars() {
        tensors.insert(name, var.as_tensor().detach());
    }
    candle_core::safetensors::save(&tensors, dir.join(MODEL_FILE))
        .map_err(|e| Error::Checkpoint(format!("writing {MODEL_FILE}: {e}")))?;
    let state = opt.export_state();
    candle_core::safetensors::save(&state, dir.join(OPTIM_FILE))
        .map_err(|e| Error::Checkpoint(format!("writing {OPTIM_FILE}: {e}")))?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        arch_fingerprint: cfg.arch_fingerprint(),
        step,
        config: cfg.clone(),
    };
    let text = toml::to_string_pretty(&meta)
        .map_err(|e| Error::Checkpoint(format!("serializing {META_FILE}: {e}")))?;
    std::fs::write(dir.join(META_FILE), text)?;
    Ok(())
}

/// Reads the metadata without touching the tensors.
pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
    })?;
    let meta: CheckpointMeta = toml::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("parsing {}: {e}", path.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {} (this build reads {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    Ok(meta)
}

/// Restores parameters (and optionally optimizer state) from a checkpoint
/// directory onto an already-built model. `expected_fingerprint` must match
/// the fingerprint stored at save time.
pub fn load(
    dir: &Path,
    model: &DiffAttnModel,
    opt: Option<&mut AdamW>,
    expected_fingerprint: &str,
) -> Result<CheckpointMeta> {
    let meta = read_meta(dir)?;
    if meta.arch_fingerprint != expected_fingerprint {
        return Err(Error::Checkpoint(format!(
            "architecture fingerprint mismatch: checkpoint has '{}', expected '{}'",
            meta.arch_fingerprint, expected_fingerprint
        )));
    }
    let device = model.params().device();
    let path = dir.join(MODEL_FILE);
    let mut tensors = candle_core::safetensors::load(&path, device)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let named = model.params().named_vars();
    for (name, var) in &named {
        let t = tensors.remove(name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint lacks parameter '{name}'"))
        })?;
        if t.shape() != var.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                t.shape(),
                var.shape()
            )));
        }
        if t.dtype() != var.dtype() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has dtype {:?} in the checkpoint but {:?} in the model",
                t.dtype(),
                var.dtype()
            )));
        }
        var.set(&t)?;
    }
    if !tensors.is_empty() {
        let mut extra: Vec<_> = tensors.keys().cloned().collect();
        extra.sort();
        return Err(Error::Checkpoint(format!(
            "checkpoint holds tensors the model does not declare: {}",
            extra.join(", ")
        )));
    }
    if let Some(opt) = opt {
        let path = dir.join(OPTIM_FILE);
        let state = candle_core::safetensors::load(&path, device)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        opt.import_state(meta.step, state)?;
    }
    Ok(meta)
}
