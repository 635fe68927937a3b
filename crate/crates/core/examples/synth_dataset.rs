//! Generates a synthetic feature store and prints per-class patch counts.
//!
//! cargo run --example synth_dataset -- out.smsg [seed]

use smooseg::feature_store::{read_dataset, write_dataset};
use smooseg::synth::{generate, SynthConfig};

fn main() -> smooseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "synthetic.smsg".into());
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));

    let cfg = SynthConfig { seed, ..Default::default() };
    let ds = generate(&cfg)?;
    write_dataset(&out, &ds)?;
    let back = read_dataset(&out)?;
    assert_eq!(back, ds);

    let mut counts = vec![0usize; cfg.k_true];
    for rec in &ds.records {
        for &v in &rec.label.as_ref().expect("synthetic data is labeled").values {
            counts[v as usize] += 1;
        }
    }
    println!("{} images, C = {}, grid {}x{}", ds.len(), ds.channels, cfg.grid_h, cfg.grid_w);
    for (c, n) in counts.iter().enumerate() {
        println!("class {c}: {n} patches");
    }
    Ok(())
}
