//! End-to-end inference and evaluation: train briefly on synthetic data,
//! sample saliency maps for the test split, write them as 16-bit PNGs with
//! heat overlays, and score them with the full metric battery.
//!
//! Run with: cargo run --release --example infer_and_eval

use candle_core::{DType, Device};
use diffattn::config::ExperimentConfig;
use diffattn::data::{load_dataset, synth_dataset, DatasetManifest, Split};
use diffattn::metrics::EvalReport;
use diffattn::schedule::SamplingPlan;
use diffattn::train::{batch_tensors, Trainer};
use diffattn::viz;

fn main() -> diffattn::Result<()> {
    let dev = Device::Cpu;
    let root = std::env::temp_dir().join("diffattn-examples/infer_eval");
    let mut cfg = ExperimentConfig::toy();
    cfg.data.root = root.join("data");
    cfg.output.dir = root.join("run");
    cfg.train.max_steps = 200;
    cfg.train.checkpoint_every = 200;
    synth_dataset(&cfg.data.root, 6, 64, 64, 11)?;
    println!("training 200 steps on 6 synthetic scenes...");
    let mut trainer = Trainer::new(cfg.clone(), &dev)?;
    let summary = trainer.run()?;
    println!("final loss {:.4}", summary.final_loss);

    let manifest = DatasetManifest::load(&cfg.data.root, Split::Test)?
        .with_resize(cfg.data.height, cfg.data.width)?;
    let samples = load_dataset(&manifest)?.samples;
    let plan = SamplingPlan::evenly_spaced(cfg.model.time_steps, cfg.sampling.steps)?;
    let out_dir = root.join("maps");
    let mut report = EvalReport::new();
    for s in &samples {
        let (img, _) = batch_tensors(std::slice::from_ref(s), DType::F32, &dev)?;
        let maps = trainer.model().infer(&img, &plan, 0)?;
        let pred = viz::tensor_map(maps.final_map())?;
        viz::save_gray16(&pred, &out_dir.join(format!("{}.png", s.id)))?;
        let overlay = viz::overlay_heat(&s.image, &pred, 0.6)?;
        diffattn::data::save_image(&overlay, &out_dir.join(format!("{}_overlay.png", s.id)))?;
        let (gt, _) = s.gt()?;
        report.evaluate(&s.id, &pred, gt.grid(), &s.fixations)?;
    }
    println!("wrote {} maps to {}", samples.len(), out_dir.display());
    print!("{}", report.to_csv());
    print!("{}", report.summary_kv()?);
    Ok(())
}
