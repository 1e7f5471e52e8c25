//! Show why the inference step budget matters: train one model, then sample
//! with plans of different lengths and compare the evaluation metrics. A far
//! shorter plan than the one intended degrades the distributional fit.
//!
//! Run with: cargo run --release --example ablate_plan

use candle_core::{DType, Device};
use diffattn::config::ExperimentConfig;
use diffattn::data::{load_dataset, synth_dataset, DatasetManifest, Split};
use diffattn::metrics::EvalReport;
use diffattn::schedule::SamplingPlan;
use diffattn::train::{batch_tensors, Trainer};
use diffattn::viz;

fn main() -> diffattn::Result<()> {
    let dev = Device::Cpu;
    let root = std::env::temp_dir().join("diffattn-examples/ablate");
    let mut cfg = ExperimentConfig::toy();
    cfg.data.root = root.join("data");
    cfg.output.dir = root.join("run");
    cfg.train.max_steps = 250;
    cfg.train.checkpoint_every = 250;
    synth_dataset(&cfg.data.root, 6, 64, 64, 21)?;
    println!("training 250 steps (intended inference budget: {} steps)...", cfg.sampling.steps);
    let mut trainer = Trainer::new(cfg.clone(), &dev)?;
    trainer.run()?;

    let manifest = DatasetManifest::load(&cfg.data.root, Split::Val)?
        .with_resize(cfg.data.height, cfg.data.width)?;
    let samples = load_dataset(&manifest)?.samples;
    println!("steps  kld      cc       sim      auc_j");
    for t_e in [1, 2, cfg.sampling.steps, 15] {
        let plan = SamplingPlan::evenly_spaced(cfg.model.time_steps, t_e)?;
        let mut report = EvalReport::new();
        for s in &samples {
            let (img, _) = batch_tensors(std::slice::from_ref(s), DType::F32, &dev)?;
            let maps = trainer.model().infer(&img, &plan, 0)?;
            let pred = viz::tensor_map(maps.final_map())?;
            let (gt, _) = s.gt()?;
            report.evaluate(&s.id, &pred, gt.grid(), &s.fixations)?;
        }
        let a = report.aggregate()?;
        println!(
            "{t_e:5}  {:.4}  {:.4}  {:.4}  {:.4}",
            a.kld, a.cc, a.sim, a.auc_j
        );
    }
    Ok(())
}
