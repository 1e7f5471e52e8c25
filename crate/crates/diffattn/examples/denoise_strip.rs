//! Visualize how a saliency map emerges from noise: run traced inference on
//! one synthetic scene and lay the sigmoid-mapped latent after each plan step
//! side by side in a single 16-bit PNG strip (noisiest on the left, final
//! clean map on the right).
//!
//! Run with: cargo run --release --example denoise_strip

use candle_core::{DType, Device};
use diffattn::config::ExperimentConfig;
use diffattn::data::{load_dataset, synth_dataset, DatasetManifest, Split};
use diffattn::schedule::SamplingPlan;
use diffattn::train::{batch_tensors, Trainer};
use diffattn::viz;

fn main() -> diffattn::Result<()> {
    let dev = Device::Cpu;
    let root = std::env::temp_dir().join("diffattn-examples/strip");
    let mut cfg = ExperimentConfig::toy();
    cfg.data.root = root.join("data");
    cfg.output.dir = root.join("run");
    cfg.train.max_steps = 150;
    cfg.train.checkpoint_every = 150;
    synth_dataset(&cfg.data.root, 4, 64, 64, 3)?;
    println!("training 150 steps so the trajectory has something to show...");
    let mut trainer = Trainer::new(cfg.clone(), &dev)?;
    trainer.run()?;

    let manifest = DatasetManifest::load(&cfg.data.root, Split::Test)?
        .with_resize(cfg.data.height, cfg.data.width)?;
    let sample = load_dataset(&manifest)?.samples.remove(0);
    let (img, _) = batch_tensors(std::slice::from_ref(&sample), DType::F32, &dev)?;
    let plan = SamplingPlan::evenly_spaced(cfg.model.time_steps, cfg.sampling.steps)?;
    let (_final_map, trace) = trainer.model().infer_traced(&img, &plan, 0)?;
    let mut frames = Vec::new();
    print!("strip frames (noise level -> final):");
    for (tau, map) in &trace {
        print!(" {tau}");
        frames.push(viz::tensor_map(map)?);
    }
    println!();
    let strip = viz::denoise_strip(&frames)?;
    let out = root.join("denoise_strip.png");
    viz::save_gray16(&strip, &out)?;
    println!(
        "wrote a {}x{} strip ({} frames) to {}",
        strip.dim().0,
        strip.dim().1,
        frames.len(),
        out.display()
    );
    Ok(())
}
