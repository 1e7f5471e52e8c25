//! Turn raw fixation points into a ground-truth saliency map: place a
//! Gaussian at every fixation, take the pixelwise maximum over all of them,
//! and normalize the peak to one. Writes the map as a 16-bit grayscale PNG.
//!
//! Run with: cargo run --example make_ground_truth

use diffattn::saliency::{default_radius, default_sigma, make_gt, FixationMap};

fn main() -> diffattn::Result<()> {
    let (h, w) = (96, 128);
    let fixations = vec![(64, 40), (66, 42), (20, 70), (110, 15)];
    let fix = FixationMap::new(w, h, fixations.clone())?;
    let sigma = default_sigma(h);
    let (gt, warning) = make_gt(&fix, sigma, default_radius(sigma))?;
    if let Some(wn) = warning {
        println!("warning: {wn:?}");
    }
    println!(
        "{}x{} map from {} fixations, sigma {:.2}",
        h,
        w,
        fixations.len(),
        sigma
    );
    let grid = gt.grid();
    let peak = grid
        .indexed_iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|((y, x), v)| (y, x, *v))
        .unwrap();
    println!("peak value {:.3} at (y={}, x={})", peak.2, peak.0, peak.1);
    for &(x, y) in &fixations {
        println!("  value at fixation (x={x:3}, y={y:2}): {:.3}", grid[[y, x]]);
    }
    let out = std::env::temp_dir().join("diffattn-examples/ground_truth.png");
    diffattn::viz::save_gray16(grid, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
