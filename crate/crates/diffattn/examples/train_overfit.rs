//! Overfit a desk-scale model on a handful of synthetic road scenes: generate
//! the dataset, train for a few hundred steps, and watch the loss drop.
//! Writes checkpoints and a CSV loss log under a temp directory.
//!
//! Run with: cargo run --release --example train_overfit
//! A step budget can be passed as the first argument (default 300).

use candle_core::Device;
use diffattn::config::ExperimentConfig;
use diffattn::data::synth_dataset;
use diffattn::train::Trainer;

fn main() -> diffattn::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let root = std::env::temp_dir().join("diffattn-examples/overfit");
    let mut cfg = ExperimentConfig::toy();
    cfg.data.root = root.join("data");
    cfg.output.dir = root.join("run");
    cfg.train.max_steps = steps;
    cfg.train.checkpoint_every = steps;
    cfg.train.log_every = 10;
    synth_dataset(&cfg.data.root, 8, 64, 64, 42)?;
    println!(
        "training a {}-channel model on 8 synthetic 64x64 scenes for {steps} steps",
        cfg.model.base_channels
    );
    let mut trainer = Trainer::new(cfg, &Device::Cpu)?;
    let start = std::time::Instant::now();
    let summary = trainer.run()?;
    let first = summary.history.first().map(|r| r.stats.total).unwrap_or(0.0);
    println!(
        "loss {first:.4} -> {:.4} over {} steps in {:.1}s",
        summary.final_loss,
        summary.steps_completed,
        start.elapsed().as_secs_f64()
    );
    for r in summary.history.iter().step_by((steps / 10).max(1)) {
        println!("  step {:4}  total {:.4}", r.step, r.stats.total);
    }
    println!(
        "checkpoint: {}",
        summary.last_checkpoint.as_ref().unwrap().display()
    );
    println!("loss log:   {}", summary.csv_path.display());
    Ok(())
}
