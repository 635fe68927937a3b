//! Independent scalar forward used as a finite-difference oracle.
//!
//! It re-derives the loss with plain loops over `Vec<f64>` and shares no code with the
//! crate beyond reading parameter values. Stop-gradients are honoured by differentiating
//! only the term each parameter group is trained on: the projector sees the smoothness
//! energy, the student prototypes see the data term with pseudo-labels held fixed.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smooseg::model::ModelState;
use smooseg::objective::{ObjectiveConfig, Reduction, SmoothnessConfig};
use smooseg::trainer::backward;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
// Below this magnitude both gradients are treated as zero-ish and compared absolutely.
pub const FLOOR: f64 = 1e-7;

fn mat(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[derive(Clone)]
struct Params {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
    ps: Vec<Vec<f64>>,
    pt: Vec<Vec<f64>>,
    tau: f64,
}

impl Params {
    fn from_state(s: &ModelState) -> Self {
        let p = &s.projector;
        Self {
            w: mat(&p.linear_w),
            b: p.linear_b.to_vec(),
            w1: mat(&p.mlp_w1),
            b1: p.mlp_b1.to_vec(),
            w2: mat(&p.mlp_w2),
            b2: p.mlp_b2.to_vec(),
            ps: mat(&s.student.0),
            pt: mat(&s.teacher.0),
            tau: s.tau,
        }
    }

    /// Unit embedding of one patch feature vector.
    fn embed(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .w1
            .iter()
            .zip(&self.b1)
            .map(|(row, bias)| {
                let u = dot(row, x) + bias;
                u / (1.0 + (-u).exp())
            })
            .collect();
        let z: Vec<f64> = (0..self.w.len())
            .map(|d| dot(&self.w[d], x) + self.b[d] + dot(&self.w2[d], &hidden) + self.b2[d])
            .collect();
        unit(&z)
    }

    fn teacher(&self, x: &[f64]) -> Vec<f64> {
        let z = self.embed(x);
        softmax(&self.pt.iter().map(|p| dot(&unit(p), &z) / self.tau).collect::<Vec<_>>())
    }
}

/// images[i][p] is the C-vector of patch p.
type Batch = Vec<Vec<Vec<f64>>>;

fn closeness(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|xp| {
            let row: Vec<f64> = b.iter().map(|xq| dot(&unit(xp), &unit(xq))).collect();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| v - mean).collect()
        })
        .collect()
}

fn penalty(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn smooth_energy(params: &Params, batch: &Batch, pairing: &[usize], sm: SmoothnessConfig) -> f64 {
    let assign: Vec<Vec<Vec<f64>>> = batch.iter().map(|img| img.iter().map(|x| params.teacher(x)).collect()).collect();
    let mut e = 0.0;
    for i in 0..batch.len() {
        let j = pairing[i];
        let w_in = closeness(&batch[i], &batch[i]);
        let w_across = closeness(&batch[i], &batch[j]);
        for p in 0..batch[i].len() {
            for q in 0..batch[i].len() {
                e += (w_in[p][q] - sm.b1) * penalty(&assign[i][p], &assign[i][q]);
                e += (w_across[p][q] - sm.b2) * penalty(&assign[i][p], &assign[j][q]);
            }
        }
    }
    e
}

fn pseudo_labels(params: &Params, batch: &Batch) -> Vec<Vec<usize>> {
    batch
        .iter()
        .map(|img| {
            img.iter()
                .map(|x| {
                    let a = params.teacher(x);
                    (0..a.len()).fold(0, |best, k| if a[k] > a[best] { k } else { best })
                })
                .collect()
        })
        .collect()
}

fn data_energy(params: &Params, batch: &Batch, labels: &[Vec<usize>]) -> f64 {
    let mut e = 0.0;
    for (img, ys) in batch.iter().zip(labels) {
        for (x, &y) in img.iter().zip(ys) {
            let z = params.embed(x);
            let a = softmax(&params.ps.iter().map(|p| dot(&unit(p), &z)).collect::<Vec<_>>());
            e -= a[y].ln();
        }
    }
    e
}

fn check(name: &str, analytic: f64, numeric: f64, worst: &mut f64) {
    let scale = analytic.abs().max(numeric.abs());
    let err = if scale < FLOOR { (analytic - numeric).abs() / FLOOR } else { (analytic - numeric).abs() / scale };
    *worst = worst.max(err);
    assert!(err < REL_TOL, "{name}: analytic {analytic:e} vs numeric {numeric:e} (rel {err:e})");
}

fn central<F: Fn(&Params) -> f64>(params: &Params, f: F, get: impl Fn(&mut Params) -> &mut f64) -> f64 {
    let mut plus = params.clone();
    *get(&mut plus) += H;
    let mut minus = params.clone();
    *get(&mut minus) -= H;
    (f(&plus) - f(&minus)) / (2.0 * H)
}

/// Worst relative error over one seeded tiny instance (B=2, N=4, C=3, D=2, K=2).
/// Panics on the first entry above [`REL_TOL`].
pub fn check_instance(seed: u64) -> f64 {
    let (b, n, c, d, k) = (2, 4, 3, 2, 2);
    let sm = SmoothnessConfig::SCENE;
    let cfg = ObjectiveConfig { smoothness: sm, reduction: Reduction::Sum, ..Default::default() };
    let pairing = [1, 0];
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut state = ModelState::init(c, c, d, k, 0.5, seed).unwrap();
    // Perturb the teacher so it differs from the student.
    state.teacher.0.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    let feats: Vec<Array2<f64>> =
        (0..b).map(|_| Array2::from_shape_fn((c, n), |_| rng.random_range(-1.0..1.0))).collect();
    let refs: Vec<&Array2<f64>> = feats.iter().collect();
    let (_, grads) = backward(&refs, &pairing, &state, &cfg).unwrap();

    let params = Params::from_state(&state);
    let batch: Batch = feats.iter().map(|f| (0..n).map(|p| f.column(p).to_vec()).collect()).collect();
    let labels = pseudo_labels(&params, &batch);
    let smooth = |p: &Params| smooth_energy(p, &batch, &pairing, sm);
    let data = |p: &Params| data_energy(p, &batch, &labels);

    let g = &grads.projector;
    for r in 0..d {
        for col in 0..c {
            check("linear_w", g.linear_w[[r, col]], central(&params, smooth, |p| &mut p.w[r][col]), &mut worst);
        }
        check("linear_b", g.linear_b[r], central(&params, smooth, |p| &mut p.b[r]), &mut worst);
        check("mlp_b2", g.mlp_b2[r], central(&params, smooth, |p| &mut p.b2[r]), &mut worst);
        for h in 0..c {
            check("mlp_w2", g.mlp_w2[[r, h]], central(&params, smooth, |p| &mut p.w2[r][h]), &mut worst);
        }
    }
    for h in 0..c {
        for col in 0..c {
            check("mlp_w1", g.mlp_w1[[h, col]], central(&params, smooth, |p| &mut p.w1[h][col]), &mut worst);
        }
        check("mlp_b1", g.mlp_b1[h], central(&params, smooth, |p| &mut p.b1[h]), &mut worst);
    }
    for kk in 0..k {
        for dd in 0..d {
            check("student", grads.student[[kk, dd]], central(&params, data, |p| &mut p.ps[kk][dd]), &mut worst);
        }
    }
    worst
}
