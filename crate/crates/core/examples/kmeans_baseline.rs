//! Mini-batch k-means on raw features, scored with the same matching protocol
//! as the trained model.
//!
//! cargo run --release --example kmeans_baseline -- [k] [seed]

use smooseg::evaluator::kmeans_baseline;
use smooseg::synth::{generate, SynthConfig};

fn main() -> smooseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().map_or(4, |s| s.parse().expect("k"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let ds = generate(&SynthConfig { n_images: 20, seed, ..Default::default() })?;
    let m = kmeans_baseline(&ds, k, 300, seed)?;
    print!("{}", m.report());
    Ok(())
}
