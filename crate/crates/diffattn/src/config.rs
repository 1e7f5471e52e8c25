//! Experiment configuration: a TOML file with one section per concern
//! (model, sampling, loss, optimizer, train, data, output), plus the two
//! built-in profiles used throughout the examples and tests.
//!
//! `validate` checks pure-config invariants; `validate_paths` additionally
//! requires referenced paths to exist (the CLI runs both, unit tests only
//! the former). `arch_fingerprint` condenses every architecture-affecting
//! field into a stable string that checkpoints embed and compare on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;

/// How the deepest-level sequence enhancement is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnhanceMode {
    /// No enhancement; the encoder's level 3 feeds the fusion pyramid as is.
    Off,
    /// Projections plus an identity sequence layer (pure plumbing check).
    Identity,
    /// Random frozen sequence layer; projections train.
    RandomFrozen,
    /// Random sequence layer, everything trains.
    RandomTrainable,
    /// Sequence layer weights loaded from a safetensors file, frozen.
    Checkpoint,
}

impl EnhanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnhanceMode::Off => "off",
            EnhanceMode::Identity => "identity",
            EnhanceMode::RandomFrozen => "random-frozen",
            EnhanceMode::RandomTrainable => "random-trainable",
            EnhanceMode::Checkpoint => "checkpoint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Channel width of the finest pyramid level; levels double from here.
    pub base_channels: usize,
    /// Channel width of the per-scale condition volumes.
    pub cond_width: usize,
    /// Base width of each scale's denoising network.
    pub unet_width: usize,
    /// Length of the internal diffusion schedule.
    pub time_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub enhance: EnhanceMode,
    /// Token width of the sequence layer (when enhancement is on).
    pub token_width: usize,
    /// Weights file for `enhance = "checkpoint"`.
    #[serde(default)]
    pub enhance_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    /// Number of denoising steps used at inference.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Named dataset whose published weight preset overrides the lambdas.
    #[serde(default)]
    pub dataset_preset: Option<String>,
}

impl LossSection {
    /// Resolves the effective weights (preset wins over explicit lambdas).
    pub fn weights(&self) -> Result<LossWeights> {
        if let Some(name) = &self.dataset_preset {
            return LossWeights::for_dataset(name).ok_or_else(|| {
                Error::Config(format!("unknown dataset preset '{name}'"))
            });
        }
        LossWeights::new(self.lambda1, self.lambda2, self.lambda3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// Only "adamw" is implemented.
    pub kind: String,
    pub learning_rate: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub seed: u64,
    /// Validation cadence in steps; 0 disables validation.
    #[serde(default)]
    pub val_every: usize,
    /// Early-stop patience in validation rounds without KLD improvement;
    /// 0 disables early stopping.
    #[serde(default)]
    pub early_stop_patience: usize,
    /// Horizontal flips and photometric jitter on training batches.
    #[serde(default)]
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root in the on-disk layout the data module reads.
    pub root: PathBuf,
    pub height: usize,
    pub width: usize,
    /// Ground-truth Gaussian spread; derived from height when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub sampling: SamplingSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Desk-scale profile: small widths, synthetic data, fast optimizer.
    pub fn toy() -> Self {
        Self {
            model: ModelSection {
                base_channels: 16,
                cond_width: 16,
                unet_width: 16,
                time_steps: 300,
                beta_min: 1e-4,
                beta_max: 0.02,
                enhance: EnhanceMode::Off,
                token_width: 256,
                enhance_checkpoint: None,
            },
            sampling: SamplingSection { steps: 5 },
            loss: LossSection {
                lambda1: 1.0,
                lambda2: 1.0,
                lambda3: 0.001,
                dataset_preset: None,
            },
            optimizer: OptimizerSection {
                kind: "adamw".into(),
                learning_rate: 1e-3,
                weight_decay: 1e-3,
                beta1: default_beta1(),
                beta2: default_beta2(),
                eps: default_adam_eps(),
            },
            train: TrainSection {
                batch_size: 4,
                max_steps: 2000,
                checkpoint_every: 500,
                log_every: 10,
                seed: 0,
                val_every: 0,
                early_stop_patience: 0,
                augment: false,
            },
            data: DataSection {
                root: PathBuf::from("data/synth"),
                height: 64,
                width: 64,
                sigma: None,
            },
            output: OutputSection {
                dir: PathBuf::from("runs/toy"),
            },
        }
    }

    /// Full-scale profile mirroring the published training setup.
    pub fn full() -> Self {
        let mut c = Self::toy();
        c.model.base_channels = 128;
        c.model.cond_width = 64;
        c.model.unet_width = 64;
        c.model.enhance = EnhanceMode::RandomFrozen;
        c.model.token_width = 2048;
        c.sampling.steps = 15;
        c.optimizer.learning_rate = 1e-5;
        c.optimizer.weight_decay = 1e-3;
        c.train.batch_size = 18;
        c.train.max_steps = 100_000;
        c.train.checkpoint_every = 2000;
        c.train.val_every = 2000;
        c.train.early_stop_patience = 5;
        c.train.augment = true;
        c.data.height = 192;
        c.data.width = 320;
        c.output.dir = PathBuf::from("runs/full");
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("reading config {}: {e}", path.display()),
            ))
        })?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("parsing {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, text).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("writing {}: {e}", path.display()),
            ))
        })
    }

    /// Pure-config invariants (no filesystem access).
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.base_channels == 0 || m.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be positive and even, got {}",
                m.base_channels
            )));
        }
        for (name, v) in [
            ("cond_width", m.cond_width),
            ("unet_width", m.unet_width),
            ("time_steps", m.time_steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if m.unet_width < 2 {
            return Err(Error::Config(format!(
                "unet_width must be at least 2, got {}",
                m.unet_width
            )));
        }
        if !(m.beta_min > 0.0 && m.beta_min < m.beta_max && m.beta_max < 1.0) {
            return Err(Error::Config(format!(
                "beta bounds must satisfy 0 < beta_min < beta_max < 1, got {} and {}",
                m.beta_min, m.beta_max
            )));
        }
        if m.enhance != EnhanceMode::Off {
            if m.token_width < 8 * m.base_channels {
                return Err(Error::Config(format!(
                    "token_width ({}) must be at least the deepest feature width ({}) \
                     for the identity-composition projection init",
                    m.token_width,
                    8 * m.base_channels
                )));
            }
            if m.enhance == EnhanceMode::Checkpoint && m.enhance_checkpoint.is_none() {
                return Err(Error::Config(
                    "enhance = \"checkpoint\" requires enhance_checkpoint".into(),
                ));
            }
        }
        if self.sampling.steps == 0 {
            return Err(Error::Config("sampling.steps must be positive".into()));
        }
        if self.sampling.steps > m.time_steps {
            return Err(Error::Config(format!(
                "sampling.steps ({}) must not exceed model.time_steps ({})",
                self.sampling.steps, m.time_steps
            )));
        }
        self.loss.weights()?;
        let o = &self.optimizer;
        if o.kind != "adamw" {
            return Err(Error::Config(format!(
                "optimizer.kind must be \"adamw\", got \"{}\"",
                o.kind
            )));
        }
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                o.learning_rate
            )));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                o.weight_decay
            )));
        }
        if !(o.beta1 > 0.0 && o.beta1 < 1.0 && o.beta2 > 0.0 && o.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "adam betas must lie in (0,1), got {} and {}",
                o.beta1, o.beta2
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.max_steps == 0 {
            return Err(Error::Config(
                "batch_size and max_steps must be positive".into(),
            ));
        }
        if t.checkpoint_every == 0 || t.log_every == 0 {
            return Err(Error::Config(
                "checkpoint_every and log_every must be positive".into(),
            ));
        }
        let d = &self.data;
        if d.height == 0 || d.width == 0 || d.height % 32 != 0 || d.width % 32 != 0 {
            return Err(Error::Config(format!(
                "data dimensions must be positive multiples of 32, got {}x{}",
                d.height, d.width
            )));
        }
        if let Some(s) = d.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Filesystem invariants: referenced paths must exist.
    pub fn validate_paths(&self) -> Result<()> {
        if !self.data.root.exists() {
            return Err(Error::Config(format!(
                "data root {} does not exist",
                self.data.root.display()
            )));
        }
        if let Some(p) = &self.model.enhance_checkpoint {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "enhance checkpoint {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Stable description of every architecture-affecting field; embedded in
    /// checkpoints and compared on load.
    pub fn arch_fingerprint(&self) -> String {
        let m = &self.model;
        format!(
            "v1/ce{}/cond{}/unet{}/ti{}/beta{:e}..{:e}/enh-{}/tok{}",
            m.base_channels,
            m.cond_width,
            m.unet_width,
            m.time_steps,
            m.beta_min,
            m.beta_max,
            m.enhance.as_str(),
            if m.enhance == EnhanceMode::Off {
                0
            } else {
                m.token_width
            },
        )
    }

    /// Effective ground-truth spread for the configured resolution.
    pub fn effective_sigma(&self) -> f64 {
        self.data
            .sigma
            .unwrap_or_else(|| crate::saliency::default_sigma(self.data.height))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_pass_validation() {
        ExperimentConfig::toy().validate().unwrap();
        ExperimentConfig::full().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_everything() {
        let cfg = ExperimentConfig::toy();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        let cfg = ExperimentConfig::full();
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = toml::to_string_pretty(&ExperimentConfig::toy()).unwrap();
        text.push_str("\n[extra]\nmystery = 1\n");
        let err = toml::from_str::<ExperimentConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn sampling_steps_bounded_by_schedule() {
        let mut cfg = ExperimentConfig::toy();
        cfg.sampling.steps = cfg.model.time_steps + 1;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("time_steps"));
    }

    #[test]
    fn bad_fields_name_themselves() {
        let cases: Vec<(Box<dyn Fn(&mut ExperimentConfig)>, &str)> = vec![
            (Box::new(|c| c.model.base_channels = 3), "base_channels"),
            (Box::new(|c| c.model.beta_min = 0.5), "beta"),
            (Box::new(|c| c.optimizer.kind = "sgd".into()), "adamw"),
            (Box::new(|c| c.optimizer.learning_rate = 0.0), "learning_rate"),
            (Box::new(|c| c.train.batch_size = 0), "batch_size"),
            (Box::new(|c| c.data.height = 100), "32"),
            (Box::new(|c| c.loss.lambda1 = -1.0), "lambda1"),
        ];
        for (mutate, needle) in cases {
            let mut cfg = ExperimentConfig::toy();
            mutate(&mut cfg);
            let err = cfg.validate().unwrap_err();
            assert_eq!(err.category(), "config", "{needle}");
            assert!(
                err.to_string().contains(needle),
                "error for '{needle}' was: {err}"
            );
        }
    }

    #[test]
    fn enhancement_requires_wide_enough_tokens() {
        let mut cfg = ExperimentConfig::toy();
        cfg.model.enhance = EnhanceMode::RandomFrozen;
        cfg.model.token_width = 8 * cfg.model.base_channels - 1;
        assert_eq!(cfg.validate().unwrap_err().category(), "config");
        cfg.model.token_width = 8 * cfg.model.base_channels;
        cfg.validate().unwrap();
    }

    #[test]
    fn checkpoint_mode_needs_a_path() {
        let mut cfg = ExperimentConfig::toy();
        cfg.model.enhance = EnhanceMode::Checkpoint;
        cfg.model.token_width = 256;
        assert_eq!(cfg.validate().unwrap_err().category(), "config");
        cfg.model.enhance_checkpoint = Some(PathBuf::from("weights.safetensors"));
        cfg.validate().unwrap();
    }

    #[test]
    fn fingerprint_tracks_architecture_not_training() {
        let a = ExperimentConfig::toy();
        let mut b = a.clone();
        b.optimizer.learning_rate = 123.0;
        b.train.batch_size = 99;
        b.sampling.steps = 2;
        assert_eq!(a.arch_fingerprint(), b.arch_fingerprint());
        let mut c = a.clone();
        c.model.unet_width = 32;
        assert_ne!(a.arch_fingerprint(), c.arch_fingerprint());
        let mut d = a.clone();
        d.model.enhance = EnhanceMode::Identity;
        d.model.token_width = 256;
        assert_ne!(a.arch_fingerprint(), d.arch_fingerprint());
    }

    #[test]
    fn preset_overrides_lambdas() {
        let mut cfg = ExperimentConfig::toy();
        cfg.loss.dataset_preset = Some("BDDA".into());
        cfg.loss.lambda2 = 42.0;
        let w = cfg.loss.weights().unwrap();
        assert_eq!(w.lambda2, 0.1);
        cfg.loss.dataset_preset = Some("nope".into());
        assert_eq!(cfg.loss.weights().unwrap_err().category(), "config");
    }

    #[test]
    fn sigma_defaults_from_height() {
        let cfg = ExperimentConfig::toy();
        assert_eq!(
            cfg.effective_sigma(),
            crate::saliency::default_sigma(cfg.data.height)
        );
        let mut with = cfg.clone();
        with.data.sigma = Some(3.5);
        assert_eq!(with.effective_sigma(), 3.5);
    }
}
