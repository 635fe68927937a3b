//! Histogram of within-image label penalties for a fresh model, a trained model
//! and a collapsed model whose teacher prototypes are all identical.
//!
//! cargo run --release --example smoothness_diagnostic -- [iterations]

use ndarray::Array2;
use smooseg::cli::dataset_delta_histogram;
use smooseg::model::{ModelState, PrototypeSet};
use smooseg::objective::DeltaHistogram;
use smooseg::synth::{generate, SynthConfig};
use smooseg::trainer::{train, TrainConfig};

fn show(name: &str, h: &DeltaHistogram) {
    println!("{name}: pairs {}, near 0 {:.3}, near 1 {:.3}", h.total(), h.frac_near_zero(), h.frac_near_one());
}

fn main() -> smooseg::Result<()> {
    let iterations = std::env::args().nth(1).map_or(300, |s| s.parse().expect("iterations"));
    let ds = generate(&SynthConfig { n_images: 20, seed: 4, ..Default::default() })?;
    let cfg = TrainConfig { iterations, k: 4, seed: 4, ..Default::default() };

    let fresh = ModelState::init(ds.channels, ds.channels, cfg.dim_d, cfg.k, cfg.tau, cfg.seed)?;
    show("fresh", &dataset_delta_histogram(&ds, &fresh, 20)?);

    let (trained, _) = train(&ds, &cfg)?;
    show("trained", &dataset_delta_histogram(&ds, &trained, 20)?);

    let mut collapsed = trained.clone();
    let row = collapsed.teacher.0.row(0).to_owned();
    collapsed.teacher = PrototypeSet(Array2::from_shape_fn((cfg.k, row.len()), |(_, j)| row[j]));
    show("collapsed", &dataset_delta_histogram(&ds, &collapsed, 20)?);
    Ok(())
}
