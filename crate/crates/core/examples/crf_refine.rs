//! Dense-CRF refinement of a noisy two-label map on a split-color image.
//! Prints the fraction of pixels that agree with the true split before and after.
//!
//! cargo run --release --example crf_refine

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smooseg::crf::{refine, CrfParams};

fn agreement(probs: &Array3<f64>, truth: impl Fn(usize, usize) -> usize) -> f64 {
    let (_, h, w) = probs.dim();
    let mut hits = 0;
    for y in 0..h {
        for x in 0..w {
            let label = if probs[[1, y, x]] > probs[[0, y, x]] { 1 } else { 0 };
            hits += (label == truth(y, x)) as usize;
        }
    }
    hits as f64 / (h * w) as f64
}

fn main() -> smooseg::Result<()> {
    let (h, w) = (32, 32);
    let truth = |_: usize, x: usize| (x >= w / 2) as usize;
    let image = Array3::from_shape_fn((3, h, w), |(c, y, x)| if truth(y, x) == 1 { [220.0, 40.0, 40.0][c] } else { 30.0 });

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut probs = Array3::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let right = truth(y, x) == 1;
            let flip = rng.random::<f64>() < 0.3;
            let p = if right != flip { 0.7 } else { 0.3 };
            probs[[1, y, x]] = p;
            probs[[0, y, x]] = 1.0 - p;
        }
    }

    let refined = refine(&probs, &image, &CrfParams::default())?;
    println!("before: {:.3}", agreement(&probs, truth));
    println!("after:  {:.3}", agreement(&refined, truth));
    Ok(())
}
