//! Trains on a synthetic split and prints the loss curve every 50 iterations
//! followed by held-out accuracy.
//!
//! cargo run --release --example train_synthetic -- [iterations] [seed]

use smooseg::evaluator::{evaluate, EvalOptions};
use smooseg::synth::{generate, SynthConfig};
use smooseg::trainer::{TrainConfig, Trainer};

fn main() -> smooseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(500, |s| s.parse().expect("iterations"));
    let seed: u64 = args.next().map_or(4, |s| s.parse().expect("seed"));

    let ds = generate(&SynthConfig { n_images: 50, seed, ..Default::default() })?;
    let train_set = ds.select(&(0..40).collect::<Vec<_>>());
    let test_set = ds.select(&(40..50).collect::<Vec<_>>());

    let cfg = TrainConfig { iterations, k: 4, seed, ..Default::default() };
    let mut trainer = Trainer::new(&train_set, cfg)?;
    println!("iter,smooth_within,smooth_across,data");
    for i in 1..=iterations {
        let loss = trainer.step()?;
        if i % 50 == 0 || i == 1 {
            println!("{i},{:.4},{:.4},{:.4}", loss.smooth_within, loss.smooth_across, loss.data);
        }
    }
    let m = evaluate(&test_set, trainer.state(), &EvalOptions::default())?;
    print!("{}", m.report());
    Ok(())
}
