use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smooseg::evaluator::{
    compute_metrics, hungarian_match, kmeans_baseline, matched_total, patch_matrix, ConfusionMatrix,
};
use smooseg::feature_store::FeatureDataset;
use smooseg::synth::{generate, SynthConfig};

fn random_confusion(rng: &mut ChaCha8Rng) -> ConfusionMatrix {
    let k_pred = rng.random_range(1..=6);
    let k_gt = rng.random_range(1..=6);
    let mut c = ConfusionMatrix::new(k_pred, k_gt);
    for v in c.counts.iter_mut() {
        *v = rng.random_range(0..50);
    }
    c
}

/// Best matched total over every injective partial assignment.
fn brute_force(c: &ConfusionMatrix) -> u64 {
    fn go(c: &ConfusionMatrix, pred: usize, used: &mut Vec<bool>) -> u64 {
        if pred == c.k_pred {
            return 0;
        }
        let mut best = go(c, pred + 1, used);
        for g in 0..c.k_gt {
            if !used[g] {
                used[g] = true;
                best = best.max(c.get(pred, g) + go(c, pred + 1, used));
                used[g] = false;
            }
        }
        best
    }
    go(c, 0, &mut vec![false; c.k_gt])
}

#[test]
fn hungarian_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let c = random_confusion(&mut rng);
        assert_eq!(matched_total(&c, &hungarian_match(&c)), brute_force(&c), "{c:?}");
    }
}

#[test]
fn metrics_invariant_under_joint_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let k = rng.random_range(2..=6);
        let mut c = ConfusionMatrix::new(k, k);
        // Wide counts make the optimal matching unique; ties may legitimately differ in mIoU.
        c.counts.iter_mut().for_each(|v| *v = rng.random_range(0..1_000_000));
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let mut moved = ConfusionMatrix::new(k, k);
        for p in 0..k {
            for g in 0..k {
                moved.counts[perm[p] * k + perm[g]] = c.get(p, g);
            }
        }
        let a = compute_metrics(&c, &hungarian_match(&c)).unwrap();
        let b = compute_metrics(&moved, &hungarian_match(&moved)).unwrap();
        assert!((a.acc - b.acc).abs() < 1e-12);
        assert!((a.miou - b.miou).abs() < 1e-12);
    }
}

#[test]
fn matched_accuracy_dominates_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let k = rng.random_range(1..=6);
        let mut c = ConfusionMatrix::new(k, k);
        c.counts.iter_mut().for_each(|v| *v = rng.random_range(0..40));
        c.counts[0] += 1;
        let identity: Vec<Option<usize>> = (0..k).map(Some).collect();
        let matched = compute_metrics(&c, &hungarian_match(&c)).unwrap();
        assert!(matched.acc >= compute_metrics(&c, &identity).unwrap().acc);
    }
}

/// Full-batch Lloyd iterations to convergence from k-means++ style farthest-point seeds.
fn lloyd_accuracy(ds: &FeatureDataset, k: usize) -> f64 {
    let pts = patch_matrix(ds);
    let n = pts.nrows();
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let mut centers = vec![pts.row(0).to_owned()];
    while centers.len() < k {
        let far = (0..n)
            .max_by(|&i, &j| {
                let di = centers.iter().map(|c| dist(pts.row(i), c.view())).fold(f64::INFINITY, f64::min);
                let dj = centers.iter().map(|c| dist(pts.row(j), c.view())).fold(f64::INFINITY, f64::min);
                di.total_cmp(&dj)
            })
            .unwrap();
        centers.push(pts.row(far).to_owned());
    }
    let mut assign = vec![usize::MAX; n];
    loop {
        let next: Vec<usize> = (0..n)
            .map(|i| (0..k).min_by(|&a, &b| dist(pts.row(i), centers[a].view()).total_cmp(&dist(pts.row(i), centers[b].view()))).unwrap())
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if !members.is_empty() {
                *center = members.iter().map(|&i| pts.row(i).to_owned()).fold(ndarray::Array1::zeros(pts.ncols()), |a, b| a + b)
                    / members.len() as f64;
            }
        }
    }
    let gt: Vec<i32> = ds.records.iter().flat_map(|r| r.label.as_ref().unwrap().values.clone()).collect();
    let mut conf = ConfusionMatrix::new(k, ds.k_gt().unwrap());
    conf.accumulate(&assign, &gt).unwrap();
    compute_metrics(&conf, &hungarian_match(&conf)).unwrap().acc
}

#[test]
fn kmeans_separates_noiseless_synth() {
    let ds = generate(&SynthConfig { noise_sigma: 0.0, n_images: 10, ..Default::default() }).unwrap();
    let m = kmeans_baseline(&ds, 4, 100, 0).unwrap();
    assert_eq!(m.acc, 1.0);
    assert!(kmeans_baseline(&ds, 1, 100, 0).is_err());
}

#[test]
fn kmeans_tracks_lloyd_oracle_on_noisy_synth() {
    for seed in 1..=3 {
        let ds = generate(&SynthConfig { n_images: 20, seed, ..Default::default() }).unwrap();
        let mb = kmeans_baseline(&ds, 4, 300, seed).unwrap().acc;
        let lloyd = lloyd_accuracy(&ds, 4);
        assert!(mb >= 0.99, "seed {seed}: k-means accuracy {mb}");
        assert!((mb - lloyd).abs() <= 0.02, "seed {seed}: mini-batch {mb} vs Lloyd {lloyd}");
    }
}
