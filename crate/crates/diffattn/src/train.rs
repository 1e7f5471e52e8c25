//! Training loop: stateless per-step randomness (batch choice, augmentation,
//! and diffusion corruption each derive a fresh stream from the run seed and
//! step index, so a resumed run replays the identical trajectory), periodic
//! checkpoints, a CSV loss log, and validation-driven early stopping.
//!
//! A non-finite loss aborts immediately with the step index and the last
//! checkpoint path, and checkpoints themselves refuse non-finite parameters,
//! so a crashed run always restarts from a sane state.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{augment, load_dataset, DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::metrics::metric_kld;
use crate::model::{DiffAttnModel, TrainStats};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::SamplingPlan;
use crate::util::derive_rng;

const BATCH_STREAM_BASE: u64 = 0x0101_0000_0000;
const AUG_STREAM_BASE: u64 = 0x0202_0000_0000;
const LATENT_STREAM_BASE: u64 = 0x0303_0000_0000;
/// Color-jitter half-range used when augmentation is enabled.
const JITTER: f64 = 0.1;
/// A validation round must beat the best KLD by this much to reset patience.
const IMPROVE_EPS: f64 = 1e-9;

/// Loss values of one completed optimizer step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// Zero-based index of the step that produced these values.
    pub step: usize,
    pub stats: TrainStats,
}

/// Outcome of [`Trainer::run`].
#[derive(Debug)]
pub struct TrainSummary {
    pub steps_completed: usize,
    pub final_loss: f64,
    pub stopped_early: bool,
    pub last_checkpoint: Option<PathBuf>,
    pub csv_path: PathBuf,
    pub history: Vec<StepRecord>,
}

/// Converts loaded samples into an image batch and its ground-truth maps.
pub fn batch_tensors(
    samples: &[Sample],
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut images = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let (h, w) = s.dims();
        let img: Vec<f64> = s.image.iter().copied().collect();
        images.push(
            Tensor::from_vec(img, (3, h, w), device)?
                .to_dtype(dtype)?,
        );
        let (map, _warning) = s.gt()?;
        let grid: Vec<f64> = map.grid().iter().copied().collect();
        gts.push(
            Tensor::from_vec(grid, (1, h, w), device)?
                .to_dtype(dtype)?,
        );
    }
    let images = Tensor::stack(&images.iter().collect::<Vec<_>>(), 0)?;
    let gts = Tensor::stack(&gts.iter().collect::<Vec<_>>(), 0)?;
    Ok((images, gts))
}

/// Owns the model, optimizer, data, and output directory of one run.
pub struct Trainer {
    cfg: ExperimentConfig,
    model: DiffAttnModel,
    opt: AdamW,
    weights: LossWeights,
    train_set: Vec<Sample>,
    val_set: Vec<Sample>,
    out_dir: PathBuf,
    csv_path: PathBuf,
    completed: usize,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// Builds a fresh run: model from the config seed, data loaded into
    /// memory, output directory created, resolved config archived.
    pub fn new(cfg: ExperimentConfig, device: &Device) -> Result<Self> {
        Self::build(cfg, device, None)
    }

    /// Continues from a checkpoint directory; the architecture fingerprint
    /// must match the provided config.
    pub fn resume(
        cfg: ExperimentConfig,
        device: &Device,
        checkpoint_dir: &Path,
    ) -> Result<Self> {
        Self::build(cfg, device, Some(checkpoint_dir))
    }

    fn build(
        cfg: ExperimentConfig,
        device: &Device,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Self> {
        cfg.validate()?;
        let weights = cfg.loss.weights()?;
        let model = DiffAttnModel::new(&cfg.model, cfg.train.seed, DType::F32, device)?;
        let mut opt = AdamW::new(AdamWConfig::from_section(&cfg.optimizer)?);
        let mut completed = 0;
        if let Some(dir) = checkpoint_dir {
            let meta = checkpoint::load(dir, &model, Some(&mut opt), &cfg.arch_fingerprint())?;
            completed = meta.step;
        }
        let train_set = Self::load_split(&cfg, Split::Train)?;
        let val_set = if cfg.train.val_every > 0 {
            Self::load_split(&cfg, Split::Val)?
        } else {
            Vec::new()
        };
        let out_dir = cfg.output.dir.clone();
        std::fs::create_dir_all(&out_dir)?;
        cfg.save(out_dir.join("config.toml"))?;
        let csv_path = out_dir.join("losses.csv");
        if checkpoint_dir.is_none() || !csv_path.exists() {
            std::fs::write(&csv_path, Self::csv_header())?;
        }
        Ok(Self {
            cfg,
            model,
            opt,
            weights,
            train_set,
            val_set,
            out_dir,
            csv_path,
            completed,
            last_checkpoint: checkpoint_dir.map(Path::to_path_buf),
        })
    }

    fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<Sample>> {
        let mut manifest = DatasetManifest::load(&cfg.data.root, split)?
            .with_resize(cfg.data.height, cfg.data.width)?;
        if let Some(sigma) = cfg.data.sigma {
            manifest = manifest.with_sigma(sigma)?;
        }
        let loaded = load_dataset(&manifest)?;
        if loaded.samples.is_empty() {
            return Err(Error::Data(format!(
                "{split} split of {} is empty",
                cfg.data.root.display()
            )));
        }
        Ok(loaded.samples)
    }

    pub fn model(&self) -> &DiffAttnModel {
        &self.model
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    fn csv_header() -> String {
        let mut h = String::from("step,total");
        for name in ["bce", "kld", "dd"] {
            for s in 0..4 {
                h.push_str(&format!(",{name}{s}"));
            }
        }
        h.push('\n');
        h
    }

    fn csv_row(r: &StepRecord) -> String {
        let mut row = format!("{},{:.9}", r.step, r.stats.total);
        for vals in [&r.stats.bce, &r.stats.kld, &r.stats.dd] {
            for v in vals.iter() {
                row.push_str(&format!(",{v:.9}"));
            }
        }
        row.push('\n');
        row
    }

    fn append_csv(&self, r: &StepRecord) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(&self.csv_path)?;
        f.write_all(Self::csv_row(r).as_bytes())?;
        Ok(())
    }

    /// Assembles the deterministic batch for a given step index.
    fn step_batch(&self, step: usize) -> Result<Vec<Sample>> {
        let n = self.train_set.len();
        let seed = self.cfg.train.seed;
        let mut batch_rng = derive_rng(seed, BATCH_STREAM_BASE + step as u64);
        let mut aug_rng = derive_rng(seed, AUG_STREAM_BASE + step as u64);
        let mut batch = Vec::with_capacity(self.cfg.train.batch_size);
        for _ in 0..self.cfg.train.batch_size {
            let i = rand::Rng::random_range(&mut batch_rng, 0..n);
            let s = &self.train_set[i];
            batch.push(if self.cfg.train.augment {
                augment(s, &mut aug_rng, JITTER)?
            } else {
                s.clone()
            });
        }
        Ok(batch)
    }

    /// Runs exactly one optimizer step and logs it to the CSV.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let step = self.completed;
        let batch = self.step_batch(step)?;
        let (images, gts) =
            batch_tensors(&batch, self.model.params().dtype(), self.model.params().device())?;
        let mut latent_rng = derive_rng(self.cfg.train.seed, LATENT_STREAM_BASE + step as u64);
        let out = self
            .model
            .train_forward(&images, &gts, &self.weights, &mut latent_rng)?;
        if !out.stats.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}; last checkpoint: {}",
                self.last_checkpoint
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into())
            )));
        }
        let grads = out.loss.backward()?;
        self.opt.step(&self.model.params().trainable_vars(), &grads)?;
        self.completed += 1;
        let record = StepRecord {
            step,
            stats: out.stats,
        };
        if step % self.cfg.train.log_every == 0 {
            self.append_csv(&record)?;
        }
        Ok(record)
    }

    /// Writes a checkpoint directory named after the step count (or a custom
    /// label) and remembers it as the restart point.
    pub fn save_checkpoint(&mut self, label: Option<&str>) -> Result<PathBuf> {
        let name = match label {
            Some(l) => l.to_string(),
            None => format!("step-{:06}", self.completed),
        };
        let dir = self.out_dir.join(name);
        checkpoint::save(&dir, &self.model, &self.opt, &self.cfg, self.completed)?;
        self.last_checkpoint = Some(dir.clone());
        Ok(dir)
    }

    /// Mean evaluation KLD of sampled maps over the validation split.
    pub fn validate_kld(&self) -> Result<f64> {
        if self.val_set.is_empty() {
            return Err(Error::Contract("no validation split loaded".into()));
        }
        let plan = SamplingPlan::evenly_spaced(
            self.model.schedule().len(),
            self.cfg.sampling.steps,
        )?;
        let seed = self.cfg.train.seed ^ 0x76_61_6c;
        let mut total = 0.0;
        for s in &self.val_set {
            let (images, _) = batch_tensors(
                std::slice::from_ref(s),
                self.model.params().dtype(),
                self.model.params().device(),
            )?;
            let out = self.model.infer(&images, &plan, seed)?;
            let (h, w) = s.dims();
            let pred = Array2::from_shape_vec(
                (h, w),
                crate::util::tensor_to_f64_vec(out.final_map())?,
            )
            .map_err(|e| Error::Shape(format!("prediction reshape: {e}")))?;
            let (gt, _) = s.gt()?;
            total += metric_kld(&pred, gt.grid())?;
        }
        Ok(total / self.val_set.len() as f64)
    }

    /// Trains until the step cap or early stopping, checkpointing on the
    /// configured cadence and once more at the end.
    pub fn run(&mut self) -> Result<TrainSummary> {
        let mut history = Vec::new();
        let mut best_val = f64::INFINITY;
        let mut rounds_without_improvement = 0;
        let mut stopped_early = false;
        while self.completed < self.cfg.train.max_steps {
            let record = self.step_once()?;
            history.push(record);
            let done = self.completed;
            if done % self.cfg.train.checkpoint_every == 0 {
                self.save_checkpoint(None)?;
            }
            if self.cfg.train.val_every > 0 && done % self.cfg.train.val_every == 0 {
                let kld = self.validate_kld()?;
                if kld < best_val - IMPROVE_EPS {
                    best_val = kld;
                    rounds_without_improvement = 0;
                } else {
                    rounds_without_improvement += 1;
                    if self.cfg.train.early_stop_patience > 0
                        && rounds_without_improvement >= self.cfg.train.early_stop_patience
                    {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        let final_dir = self.save_checkpoint(Some("final"))?;
        Ok(TrainSummary {
            steps_completed: self.completed,
            final_loss: history.last().map(|r| r.stats.total).unwrap_or(f64::NAN),
            stopped_early,
            last_checkpoint: Some(final_dir),
            csv_path: self.csv_path.clone(),
            history,
        })
    }
}
