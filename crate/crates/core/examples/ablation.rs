//! Objective ablation on the synthetic benchmark: full objective, no across-image
//! term, no smoothness term. Prints held-out accuracy per seed.
//!
//! cargo run --release --example ablation -- [iterations] [seeds...]

use std::time::Instant;

use smooseg::evaluator::{evaluate, EvalOptions};
use smooseg::synth::{generate, SynthConfig};
use smooseg::trainer::{train, TrainConfig};

fn main() -> smooseg::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let iterations = args.first().map_or(500, |s| s.parse().expect("iterations"));
    let seeds: Vec<u64> = if args.len() > 1 { args[1..].iter().map(|s| s.parse().expect("seed")).collect() } else { vec![1, 2, 3] };

    println!("seed,variant,acc,miou,seconds");
    for &seed in &seeds {
        let ds = generate(&SynthConfig { n_images: 50, seed, ..Default::default() })?;
        let train_set = ds.select(&(0..40).collect::<Vec<_>>());
        let test_set = ds.select(&(40..50).collect::<Vec<_>>());
        let variants = [("full", false, false), ("no_across", true, false), ("no_smooth", false, true)];
        for (name, no_across, no_smooth) in variants {
            let cfg = TrainConfig {
                iterations,
                k: 4,
                seed,
                disable_across_term: no_across,
                disable_smooth_term: no_smooth,
                ..Default::default()
            };
            let start = Instant::now();
            let (state, _) = train(&train_set, &cfg)?;
            let secs = start.elapsed().as_secs_f64();
            let m = evaluate(&test_set, &state, &EvalOptions::default())?;
            println!("{seed},{name},{:.4},{:.4},{secs:.1}", m.acc, m.miou);
        }
    }
    Ok(())
}
