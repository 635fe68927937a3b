//! Scores a hand-written confusion matrix: matching, accuracy, per-class IoU.
//!
//! cargo run --example hungarian_eval

use smooseg::evaluator::{compute_metrics, hungarian_match, ConfusionMatrix};

fn main() -> smooseg::Result<()> {
    // rows: predicted clusters, columns: ground-truth classes
    let conf = ConfusionMatrix::from_rows(&[
        vec![2, 50, 1],
        vec![40, 3, 0],
        vec![5, 0, 30],
        vec![1, 1, 9],
    ])?;
    let matching = hungarian_match(&conf);
    for (pred, gt) in matching.iter().enumerate() {
        match gt {
            Some(g) => println!("cluster {pred} -> class {g}"),
            None => println!("cluster {pred} unmatched"),
        }
    }
    let m = compute_metrics(&conf, &matching)?;
    print!("{}", m.report());
    print!("{}", m.per_class_csv());
    Ok(())
}
