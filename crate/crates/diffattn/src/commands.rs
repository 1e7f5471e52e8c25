//! CLI entry points. Each subcommand is a thin wrapper over the library:
//! `train`, `infer`, `eval`, `viz-denoise`, `ablate-steps`, `synth-data`,
//! and `make-gt`.
//!
//! The compute device comes from the `DIFFATTN_DEVICE` environment variable
//! (`cpu` by default). Failures print `error[<category>]: <message>` on
//! stderr and exit with the category's dedicated nonzero code, so scripts can
//! dispatch on the failure class without parsing prose.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use ndarray::Array2;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::ExperimentConfig;
use crate::data::{load_dataset, synth_dataset, DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::DiffAttnModel;
use crate::schedule::SamplingPlan;
use crate::train::{batch_tensors, Trainer};
use crate::viz;

/// Environment variable naming the compute device (`cpu`, `cuda[:N]`,
/// `metal`).
pub const DEVICE_ENV: &str = "DIFFATTN_DEVICE";

/// Resolves the device from the environment (default: CPU).
pub fn device_from_env() -> Result<Device> {
    let raw = match std::env::var(DEVICE_ENV) {
        Err(_) => return Ok(Device::Cpu),
        Ok(v) => v,
    };
    let v = raw.trim().to_lowercase();
    if v.is_empty() || v == "cpu" {
        return Ok(Device::Cpu);
    }
    if let Some(rest) = v.strip_prefix("cuda") {
        let idx = match rest.strip_prefix(':') {
            None if rest.is_empty() => 0,
            Some(n) => n.parse::<usize>().map_err(|_| {
                Error::Config(format!("invalid device ordinal in '{raw}'"))
            })?,
            None => {
                return Err(Error::Config(format!(
                    "unknown device '{raw}' (use cpu, cuda[:N], or metal)"
                )))
            }
        };
        return Ok(Device::new_cuda(idx)?);
    }
    if v == "metal" {
        return Ok(Device::new_metal(0)?);
    }
    Err(Error::Config(format!(
        "unknown device '{raw}' (use cpu, cuda[:N], or metal)"
    )))
}

fn parse_split(s: &str) -> Result<Split> {
    Split::from_str(s)
        .map_err(|_| Error::Config(format!("unknown split '{s}' (train, val, or test)")))
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let p = part.trim();
        if p.is_empty() {
            continue;
        }
        out.push(
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid list entry '{p}'")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Config(format!("empty list '{s}'")));
    }
    Ok(out)
}

/// Loads one split at the config's resolution and spread.
fn load_split_for(cfg: &ExperimentConfig, split: Split) -> Result<Vec<Sample>> {
    let mut manifest = DatasetManifest::load(&cfg.data.root, split)?
        .with_resize(cfg.data.height, cfg.data.width)?;
    if let Some(sigma) = cfg.data.sigma {
        manifest = manifest.with_sigma(sigma)?;
    }
    let loaded = load_dataset(&manifest)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    if loaded.samples.is_empty() {
        return Err(Error::Data(format!(
            "{split} split of {} is empty",
            cfg.data.root.display()
        )));
    }
    Ok(loaded.samples)
}

/// Rebuilds the model a checkpoint was saved from and restores its weights.
/// A config override must match the stored architecture fingerprint.
fn load_model_from_checkpoint(
    dir: &Path,
    config_override: Option<&Path>,
    device: &Device,
) -> Result<(DiffAttnModel, ExperimentConfig, CheckpointMeta)> {
    let meta = checkpoint::read_meta(dir)?;
    let cfg = match config_override {
        Some(p) => {
            let c = ExperimentConfig::load(p)?;
            if c.arch_fingerprint() != meta.arch_fingerprint {
                return Err(Error::Checkpoint(format!(
                    "config {} has fingerprint '{}' but the checkpoint was written with '{}'",
                    p.display(),
                    c.arch_fingerprint(),
                    meta.arch_fingerprint
                )));
            }
            c
        }
        None => meta.config.clone(),
    };
    let model = DiffAttnModel::new(&cfg.model, cfg.train.seed, DType::F32, device)?;
    checkpoint::load(dir, &model, None, &cfg.arch_fingerprint())?;
    Ok((model, cfg, meta))
}

fn sampling_plan(cfg: &ExperimentConfig, steps: Option<usize>) -> Result<SamplingPlan> {
    SamplingPlan::evenly_spaced(cfg.model.time_steps, steps.unwrap_or(cfg.sampling.steps))
}

/// Samples one map per listed sample and returns `(id, map)` pairs.
fn infer_split(
    model: &DiffAttnModel,
    samples: &[Sample],
    plan: &SamplingPlan,
    seed: u64,
    device: &Device,
) -> Result<Vec<(String, Array2<f64>)>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let (images, _) = batch_tensors(std::slice::from_ref(s), DType::F32, device)?;
        let maps = model.infer(&images, plan, seed)?;
        out.push((s.id.clone(), viz::tensor_map(maps.final_map())?));
    }
    Ok(out)
}

/// Runs the full metric battery of sampled maps against a split.
fn eval_model_on_split(
    model: &DiffAttnModel,
    samples: &[Sample],
    plan: &SamplingPlan,
    seed: u64,
    device: &Device,
) -> Result<EvalReport> {
    let mut report = EvalReport::new();
    for (s, (id, pred)) in samples
        .iter()
        .zip(infer_split(model, samples, plan, seed, device)?)
    {
        let (gt, _) = s.gt()?;
        report.evaluate(&id, &pred, gt.grid(), &s.fixations)?;
    }
    Ok(report)
}

#[derive(Debug, Parser)]
#[command(
    name = "diffattn",
    about = "Driver visual-attention prediction via multi-scale conditional diffusion",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model (fresh or resumed from a checkpoint).
    Train(TrainArgs),
    /// Sample saliency maps for a split and write them as 16-bit PNGs.
    Infer(InferArgs),
    /// Score a directory of predicted maps against a split's ground truth.
    Eval(EvalArgs),
    /// Render the denoising trajectory of one sample as a horizontal strip.
    VizDenoise(VizDenoiseArgs),
    /// Compare different inference step budgets.
    AblateSteps(AblateStepsArgs),
    /// Generate a synthetic road-scene dataset.
    SynthData(SynthDataArgs),
    /// Render ground-truth saliency maps for a split.
    MakeGt(MakeGtArgs),
}

#[derive(Debug, Parser)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to resume from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
pub struct InferArgs {
    /// Checkpoint directory to load.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Optional config override (must match the checkpoint's architecture).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the PNG maps.
    #[arg(long)]
    pub out: PathBuf,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset split to run on.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also write `<id>_overlay.png` heat blends over the input frames.
    #[arg(long)]
    pub overlay: bool,
    /// Only process the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Parser)]
pub struct EvalArgs {
    /// Directory holding `<id>.png` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Experiment config naming the dataset.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset split to score against.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Where to write the per-sample CSV (default: `<pred>/eval.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
pub struct VizDenoiseArgs {
    /// Checkpoint directory to load.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Optional config override (must match the checkpoint's architecture).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output PNG path for the strip.
    #[arg(long)]
    pub out: PathBuf,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset split to draw the sample from.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Index of the sample within the split.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Comma-separated step indices to keep (default: the whole trajectory;
    /// 0 denotes the final clean map).
    #[arg(long)]
    pub taus: Option<String>,
}

#[derive(Debug, Parser)]
pub struct AblateStepsArgs {
    /// `plan`: vary only the inference plan of one checkpoint.
    /// `retrain`: train one model per step budget.
    #[arg(long, default_value = "plan")]
    pub mode: String,
    /// Comma-separated inference step budgets to compare.
    #[arg(long)]
    pub steps: String,
    /// Checkpoint directory (plan mode).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Experiment config (retrain mode, or plan-mode override).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset split to score.
    #[arg(long, default_value = "val")]
    pub split: String,
}

#[derive(Debug, Parser)]
pub struct SynthDataArgs {
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Parser)]
pub struct MakeGtArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Split whose ground truth to render.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Output directory for `<id>.png` maps.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the manifest's Gaussian spread.
    #[arg(long)]
    pub sigma: Option<f64>,
}

pub fn run_train(args: &TrainArgs) -> Result<()> {
    let device = device_from_env()?;
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate_paths()?;
    let mut trainer = match &args.checkpoint {
        Some(dir) => Trainer::resume(cfg, &device, dir)?,
        None => Trainer::new(cfg, &device)?,
    };
    let summary = trainer.run()?;
    println!("steps={}", summary.steps_completed);
    println!("final_loss={:.6}", summary.final_loss);
    println!("stopped_early={}", summary.stopped_early);
    if let Some(p) = &summary.last_checkpoint {
        println!("checkpoint={}", p.display());
    }
    println!("losses_csv={}", summary.csv_path.display());
    Ok(())
}

pub fn run_infer(args: &InferArgs) -> Result<()> {
    let device = device_from_env()?;
    let (model, cfg, _meta) =
        load_model_from_checkpoint(&args.checkpoint, args.config.as_deref(), &device)?;
    let split = parse_split(&args.split)?;
    let mut samples = load_split_for(&cfg, split)?;
    if let Some(limit) = args.limit {
        samples.truncate(limit);
    }
    let plan = sampling_plan(&cfg, None)?;
    std::fs::create_dir_all(&args.out)?;
    let maps = infer_split(&model, &samples, &plan, args.seed, &device)?;
    for (s, (id, map)) in samples.iter().zip(&maps) {
        viz::save_gray16(map, &args.out.join(format!("{id}.png")))?;
        if args.overlay {
            let blended = viz::overlay_heat(&s.image, map, 0.6)?;
            crate::data::save_image(&blended, &args.out.join(format!("{id}_overlay.png")))?;
        }
    }
    println!("samples={}", maps.len());
    println!("out={}", args.out.display());
    Ok(())
}

pub fn run_eval(args: &EvalArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let split = parse_split(&args.split)?;
    let samples = load_split_for(&cfg, split)?;
    let mut report = EvalReport::new();
    for s in &samples {
        let path = args.pred.join(format!("{}.png", s.id));
        if !path.exists() {
            return Err(Error::Data(format!(
                "no prediction for sample '{}' at {}",
                s.id,
                path.display()
            )));
        }
        let pred = viz::load_gray16(&path)?;
        let (h, w) = s.dims();
        if pred.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "prediction for '{}' is {:?}, expected {h}x{w}",
                s.id,
                pred.dim()
            )));
        }
        let (gt, _) = s.gt()?;
        report.evaluate(&s.id, &pred, gt.grid(), &s.fixations)?;
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.pred.join("eval.csv"));
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out, report.to_csv())?;
    print!("{}", report.summary_kv()?);
    println!("csv={}", out.display());
    Ok(())
}

pub fn run_viz_denoise(args: &VizDenoiseArgs) -> Result<()> {
    let device = device_from_env()?;
    let (model, cfg, _meta) =
        load_model_from_checkpoint(&args.checkpoint, args.config.as_deref(), &device)?;
    let split = parse_split(&args.split)?;
    let samples = load_split_for(&cfg, split)?;
    let sample = samples.get(args.index).ok_or_else(|| {
        Error::Config(format!(
            "sample index {} out of range ({} samples in {split})",
            args.index,
            samples.len()
        ))
    })?;
    let plan = sampling_plan(&cfg, None)?;
    let (images, _) = batch_tensors(std::slice::from_ref(sample), DType::F32, &device)?;
    let (_final_map, trace) = model.infer_traced(&images, &plan, args.seed)?;
    let keep: Option<Vec<usize>> = match &args.taus {
        Some(s) => Some(parse_usize_list(s)?),
        None => None,
    };
    let mut frames = Vec::new();
    let mut kept_taus = Vec::new();
    for (tau, map) in &trace {
        let wanted = keep.as_ref().map(|k| k.contains(tau)).unwrap_or(true);
        if wanted {
            frames.push(viz::tensor_map(map)?);
            kept_taus.push(*tau);
        }
    }
    if let Some(k) = &keep {
        let available: Vec<usize> = trace.iter().map(|(t, _)| *t).collect();
        for want in k {
            if !available.contains(want) {
                return Err(Error::Step(format!(
                    "step index {want} is not part of the plan {available:?}"
                )));
            }
        }
    }
    let strip = viz::denoise_strip(&frames)?;
    viz::save_gray16(&strip, &args.out)?;
    println!("sample={}", sample.id);
    println!(
        "taus={}",
        kept_taus
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    println!("out={}", args.out.display());
    Ok(())
}

fn ablation_csv_header() -> &'static str {
    "steps,kld,cc,sim,nss,auc_j\n"
}

fn ablation_csv_row(steps: usize, report: &EvalReport) -> Result<String> {
    let a = report.aggregate()?;
    Ok(format!(
        "{steps},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        a.kld, a.cc, a.sim, a.nss, a.auc_j
    ))
}

pub fn run_ablate_steps(args: &AblateStepsArgs) -> Result<()> {
    let device = device_from_env()?;
    let budgets = parse_usize_list(&args.steps)?;
    let split = parse_split(&args.split)?;
    let mut csv = String::from(ablation_csv_header());
    match args.mode.as_str() {
        "plan" => {
            let dir = args.checkpoint.as_ref().ok_or_else(|| {
                Error::Config("plan mode requires --checkpoint".into())
            })?;
            let (model, cfg, _meta) =
                load_model_from_checkpoint(dir, args.config.as_deref(), &device)?;
            let samples = load_split_for(&cfg, split)?;
            for &t_e in &budgets {
                let plan = sampling_plan(&cfg, Some(t_e))?;
                let report = eval_model_on_split(&model, &samples, &plan, args.seed, &device)?;
                csv.push_str(&ablation_csv_row(t_e, &report)?);
            }
        }
        "retrain" => {
            let config_path = args.config.as_ref().ok_or_else(|| {
                Error::Config("retrain mode requires --config".into())
            })?;
            let base = ExperimentConfig::load(config_path)?;
            base.validate_paths()?;
            let workdir = args
                .out
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            for &t_e in &budgets {
                let mut cfg = base.clone();
                cfg.sampling.steps = t_e;
                cfg.output.dir = workdir.join(format!("retrain-te{t_e}"));
                cfg.validate()?;
                let mut trainer = Trainer::new(cfg, &device)?;
                trainer.run()?;
                let cfg = trainer.config().clone();
                let samples = load_split_for(&cfg, split)?;
                let plan = sampling_plan(&cfg, Some(t_e))?;
                let report =
                    eval_model_on_split(trainer.model(), &samples, &plan, args.seed, &device)?;
                csv.push_str(&ablation_csv_row(t_e, &report)?);
            }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown mode '{other}' (use plan or retrain)"
            )));
        }
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn run_synth_data(args: &SynthDataArgs) -> Result<()> {
    synth_dataset(&args.out, args.count, args.height, args.width, args.seed)?;
    println!("samples={}", args.count);
    println!("out={}", args.out.display());
    Ok(())
}

pub fn run_make_gt(args: &MakeGtArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let mut manifest = DatasetManifest::load(&args.data, split)?;
    if let Some(sigma) = args.sigma {
        manifest = manifest.with_sigma(sigma)?;
    }
    let loaded = load_dataset(&manifest)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&args.out)?;
    let mut count = 0usize;
    for s in &loaded.samples {
        let (gt, warning) = s.gt()?;
        if let Some(w) = warning {
            eprintln!("warning: sample '{}': {w:?}", s.id);
        }
        viz::save_gray16(gt.grid(), &args.out.join(format!("{}.png", s.id)))?;
        count += 1;
    }
    println!("samples={count}");
    println!("out={}", args.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::VizDenoise(a) => run_viz_denoise(a),
        Command::AblateSteps(a) => run_ablate_steps(a),
        Command::SynthData(a) => run_synth_data(a),
        Command::MakeGt(a) => run_make_gt(a),
    }
}

/// Binary entry point: parse, dispatch, and map failures to the category
/// banner plus its exit code.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
