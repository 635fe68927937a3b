mod common;

#[test]
fn backward_matches_central_differences_on_twenty_instances() {
    let start = std::time::Instant::now();
    let worst = (0..20).map(common::check_instance).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    println!("worst relative error {worst:e} over 20 instances in {secs:.2}s");
    assert!(secs < 10.0);
}
