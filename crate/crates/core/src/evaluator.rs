//! Unsupervised evaluation: one dataset-wide Hungarian matching of predicted clusters
//! to ground-truth classes, then pixel accuracy and mIoU.

use std::collections::HashSet;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{self, source_coord, CrfParams};
use crate::feature_store::{FeatureDataset, FeatureRecord};
use crate::linalg::argmax_columns;
use crate::model::{teacher_assignments, ModelState};
use crate::{Error, Result};

/// Pixel counts indexed `[pred, gt]`. Ignore-labeled pixels are never added.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k_pred: usize,
    pub k_gt: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k_pred: usize, k_gt: usize) -> Self {
        Self { k_pred, k_gt, counts: vec![0; k_pred * k_gt] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k_gt = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k_gt) {
            return Err(Error::shape("ragged confusion rows"));
        }
        Ok(Self { k_pred: rows.len(), k_gt, counts: rows.concat() })
    }

    pub fn get(&self, pred: usize, gt: usize) -> u64 {
        self.counts[pred * self.k_gt + gt]
    }

    pub fn add(&mut self, pred: usize, gt: usize) {
        self.counts[pred * self.k_gt + gt] += 1;
    }

    /// Adds a predicted/ground-truth map pair. Negative ground truth is ignored.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[i32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("{} predictions vs {} labels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g < 0 {
                continue;
            }
            let g = g as usize;
            if p >= self.k_pred || g >= self.k_gt {
                return Err(Error::invalid(format!("pair ({p}, {g}) outside {}x{}", self.k_pred, self.k_gt)));
            }
            self.add(p, g);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if (self.k_pred, self.k_gt) != (other.k_pred, other.k_gt) {
            return Err(Error::shape("confusion matrices differ in size"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Optimal one-to-one assignment of predicted clusters to ground-truth classes,
/// maximizing the matched pixel count. `None` marks clusters left unmatched when
/// there are more clusters than classes.
pub fn hungarian_match(conf: &ConfusionMatrix) -> Vec<Option<usize>> {
    let n = conf.k_pred.max(conf.k_gt);
    if n == 0 {
        return Vec::new();
    }
    // Square cost matrix (1-indexed below); padding entries cost 0.
    let cost = |i: usize, j: usize| -> i64 {
        if i < conf.k_pred && j < conf.k_gt {
            -(conf.get(i, j) as i64)
        } else {
            0
        }
    };
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![None; conf.k_pred];
    for j in 1..=n {
        let i = row_of_col[j] - 1;
        if i < conf.k_pred && j - 1 < conf.k_gt {
            perm[i] = Some(j - 1);
        }
    }
    perm
}

/// Sum of matched counts under `perm`.
pub fn matched_total(conf: &ConfusionMatrix, perm: &[Option<usize>]) -> u64 {
    perm.iter().enumerate().filter_map(|(p, g)| g.map(|g| conf.get(p, g))).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub miou: f64,
    /// IoU per ground-truth class; `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

impl Metrics {
    /// `key: value` lines.
    pub fn report(&self) -> String {
        let present = self.per_class_iou.iter().filter(|v| v.is_some()).count();
        format!("acc: {:.6}\nmiou: {:.6}\nclasses: {}\n", self.acc, self.miou, present)
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (k, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("{k},{v}\n")),
                None => out.push_str(&format!("{k},\n")),
            }
        }
        out
    }
}

/// Accuracy and IoU after relabeling predictions through `perm`.
pub fn compute_metrics(conf: &ConfusionMatrix, perm: &[Option<usize>]) -> Result<Metrics> {
    let total = conf.total();
    if total == 0 {
        return Err(Error::invalid("confusion matrix is empty"));
    }
    if perm.len() != conf.k_pred {
        return Err(Error::shape(format!("permutation has {} entries for {} clusters", perm.len(), conf.k_pred)));
    }
    let mut seen = HashSet::new();
    for g in perm.iter().flatten() {
        if *g >= conf.k_gt || !seen.insert(*g) {
            return Err(Error::invalid("permutation maps two clusters to one class or out of range"));
        }
    }
    let gt_totals: Vec<u64> = (0..conf.k_gt).map(|g| (0..conf.k_pred).map(|p| conf.get(p, g)).sum()).collect();
    let mut per_class_iou = vec![None; conf.k_gt];
    let mut correct = 0;
    for g in 0..conf.k_gt {
        let pred = perm.iter().position(|&m| m == Some(g));
        let (tp, pred_total) = match pred {
            Some(p) => (conf.get(p, g), (0..conf.k_gt).map(|gg| conf.get(p, gg)).sum()),
            None => (0, 0),
        };
        correct += tp;
        if gt_totals[g] > 0 {
            let fp = pred_total - tp;
            let fn_ = gt_totals[g] - tp;
            per_class_iou[g] = Some(tp as f64 / (tp + fp + fn_) as f64);
        }
    }
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(Metrics {
        acc: correct as f64 / total as f64,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class_iou,
    })
}

/// How patch-level predictions reach pixel resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Upsampling {
    /// Bilinear interpolation of class probabilities, then argmax.
    #[default]
    Bilinear,
    /// Argmax at patch level, then nearest-neighbour label copy.
    Nearest,
}

/// Bilinearly interpolated class probabilities, `K x (H*W)`.
pub fn upsample_probs(probs: &Array2<f64>, grid: (usize, usize), target: (usize, usize)) -> Result<Array2<f64>> {
    let (gh, gw) = grid;
    let (th, tw) = target;
    if probs.ncols() != gh * gw {
        return Err(Error::shape(format!("{} columns for a {gh}x{gw} grid", probs.ncols())));
    }
    if th < gh || tw < gw {
        return Err(Error::shape(format!("target {th}x{tw} is smaller than grid {gh}x{gw}")));
    }
    let k = probs.nrows();
    let ys: Vec<_> = (0..th).map(|y| source_coord(y, gh, th)).collect();
    let xs: Vec<_> = (0..tw).map(|x| source_coord(x, gw, tw)).collect();
    let mut out = Array2::zeros((k, th * tw));
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let dst = y * tw + x;
            for l in 0..k {
                let at = |r: usize, c: usize| probs[[l, r * gw + c]];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[[l, dst]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Pixel labels from patch probabilities: bilinear upsampling then argmax, lowest class on ties.
pub fn upsample_predictions(probs: &Array2<f64>, grid: (usize, usize), target: (usize, usize)) -> Result<Vec<usize>> {
    Ok(argmax_columns(&upsample_probs(probs, grid, target)?))
}

fn nearest_labels(labels: &[usize], grid: (usize, usize), target: (usize, usize)) -> Result<Vec<usize>> {
    let (gh, gw) = grid;
    let (th, tw) = target;
    if th < gh || tw < gw {
        return Err(Error::shape(format!("target {th}x{tw} is smaller than grid {gh}x{gw}")));
    }
    Ok((0..th * tw)
        .map(|i| {
            let (y, x) = (i / tw, i % tw);
            labels[(y * gh / th) * gw + x * gw / tw]
        })
        .collect())
}

/// Guide image for CRF refinement: `3 x H x W`, intensities in `0..=255`.
pub type GuideImage = Array3<f64>;

#[derive(Debug, Clone, Default)]
pub struct EvalOptions<'a> {
    pub crf: Option<CrfParams>,
    pub upsampling: Upsampling,
    /// One guide per record. Without guides the CRF sees a constant image, so only
    /// spatial proximity shapes its messages.
    pub guides: Option<&'a [GuideImage]>,
}

/// Pixel labels for one record from per-patch class probabilities (`K x N`).
pub fn pixel_predictions(
    probs: &Array2<f64>,
    rec: &FeatureRecord,
    target: (usize, usize),
    guide: Option<&GuideImage>,
    opts: &EvalOptions<'_>,
) -> Result<Vec<usize>> {
    let grid = (rec.grid_h, rec.grid_w);
    match (opts.crf, opts.upsampling) {
        (None, Upsampling::Nearest) => nearest_labels(&argmax_columns(probs), grid, target),
        (None, Upsampling::Bilinear) => upsample_predictions(probs, grid, target),
        (Some(params), _) => {
            let up = match opts.upsampling {
                Upsampling::Bilinear => upsample_probs(probs, grid, target)?,
                Upsampling::Nearest => {
                    let labels = nearest_labels(&argmax_columns(probs), grid, target)?;
                    let mut one_hot = Array2::zeros((probs.nrows(), labels.len()));
                    labels.iter().enumerate().for_each(|(i, &l)| one_hot[[l, i]] = 1.0);
                    one_hot
                }
            };
            let planes = crf::as_planes(up, target.0, target.1)?;
            let constant;
            let image = match guide {
                Some(g) => g,
                None => {
                    constant = Array3::zeros((3, target.0, target.1));
                    &constant
                }
            };
            let refined = crf::refine_downscaled(&planes, image, &params, crf::MAX_WORKING_SIDE)?;
            let k = refined.dim().0;
            Ok(argmax_columns(&refined.into_shape_with_order((k, target.0 * target.1)).expect("contiguous")))
        }
    }
}

fn ground_truth_classes(ds: &FeatureDataset) -> Result<usize> {
    if !ds.has_labels() {
        return Err(Error::NoGroundTruth);
    }
    ds.k_gt().ok_or(Error::NoGroundTruth)
}

fn check_guides(ds: &FeatureDataset, opts: &EvalOptions<'_>) -> Result<()> {
    if let Some(guides) = opts.guides {
        if guides.len() != ds.len() {
            return Err(Error::shape(format!("{} guide images for {} records", guides.len(), ds.len())));
        }
        for (g, rec) in guides.iter().zip(&ds.records) {
            let label = rec.label.as_ref().ok_or(Error::NoGroundTruth)?;
            if g.dim() != (3, label.height, label.width) {
                return Err(Error::shape("guide image size differs from its label map"));
            }
        }
    }
    Ok(())
}

/// Confusion of per-patch class probabilities against every record's labels.
pub fn confusion_from_probs(
    ds: &FeatureDataset,
    probs: &[Array2<f64>],
    k_pred: usize,
    opts: &EvalOptions<'_>,
) -> Result<ConfusionMatrix> {
    let k_gt = ground_truth_classes(ds)?;
    check_guides(ds, opts)?;
    let mut conf = ConfusionMatrix::new(k_pred, k_gt);
    for (i, (rec, p)) in ds.records.iter().zip(probs).enumerate() {
        let label = rec.label.as_ref().ok_or(Error::NoGroundTruth)?;
        let guide = opts.guides.map(|g| &g[i]);
        let pred = pixel_predictions(p, rec, (label.height, label.width), guide, opts)?;
        conf.accumulate(&pred, &label.values)?;
    }
    Ok(conf)
}

/// Full protocol result.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
    pub matching: Vec<Option<usize>>,
}

/// Teacher assignments → optional CRF → pixel predictions → dataset-wide confusion →
/// Hungarian matching → metrics.
pub fn evaluate_detailed(ds: &FeatureDataset, state: &ModelState, opts: &EvalOptions<'_>) -> Result<Evaluation> {
    ground_truth_classes(ds)?;
    if state.channels() != ds.channels {
        return Err(Error::shape(format!(
            "checkpoint expects C = {}, dataset has C = {}",
            state.channels(),
            ds.channels
        )));
    }
    let probs = ds
        .records
        .iter()
        .map(|r| teacher_assignments(state, &r.features_f64()).map(|a| a.0))
        .collect::<Result<Vec<_>>>()?;
    let confusion = confusion_from_probs(ds, &probs, state.dim_k(), opts)?;
    let matching = hungarian_match(&confusion);
    let metrics = compute_metrics(&confusion, &matching)?;
    Ok(Evaluation { metrics, confusion, matching })
}

pub fn evaluate(ds: &FeatureDataset, state: &ModelState, opts: &EvalOptions<'_>) -> Result<Metrics> {
    evaluate_detailed(ds, state, opts).map(|e| e.metrics)
}

/// Mini-batch k-means over the rows of a point matrix (`n x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatchKMeans {
    pub k: usize,
    pub batch_size: usize,
    pub iterations: usize,
    /// Independent seedings; the lowest-inertia result wins.
    pub restarts: usize,
    pub seed: u64,
}

impl MiniBatchKMeans {
    /// Returns the `k x C` centers of the restart with the lowest inertia. Each restart
    /// seeds with greedy k-means++ over all points, then runs Sculley updates.
    pub fn fit(&self, points: &Array2<f64>) -> Result<Array2<f64>> {
        if self.k < 2 {
            return Err(Error::config(format!("k-means needs k >= 2, got {}", self.k)));
        }
        let distinct = count_distinct_rows(points, self.k);
        if distinct < self.k {
            return Err(Error::invalid(format!("k = {} exceeds the {distinct} distinct feature vectors", self.k)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut best: Option<(f64, Array2<f64>)> = None;
        for _ in 0..self.restarts.max(1) {
            let centers = self.fit_once(points, &mut rng);
            let inertia: f64 = points.axis_iter(Axis(0)).map(|row| nearest_center(&centers, row).1).sum();
            if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
                best = Some((inertia, centers));
            }
        }
        Ok(best.expect("at least one restart").1)
    }

    fn fit_once(&self, points: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut centers = kmeans_plus_plus(points, self.k, rng);
        let n = points.nrows();
        let batch = self.batch_size.clamp(1, n);
        let mut counts = vec![0u64; self.k];
        for _ in 0..self.iterations {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
            let nearest: Vec<usize> = idx.iter().map(|&i| nearest_center(&centers, points.row(i)).0).collect();
            for (&i, &c) in idx.iter().zip(&nearest) {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                let mut center = centers.row_mut(c);
                center *= 1.0 - eta;
                center.scaled_add(eta, &points.row(i));
            }
        }
        centers
    }

    pub fn predict(centers: &Array2<f64>, points: &Array2<f64>) -> Vec<usize> {
        points.axis_iter(Axis(0)).map(|row| nearest_center(centers, row).0).collect()
    }
}

fn count_distinct_rows(points: &Array2<f64>, enough: usize) -> usize {
    let mut seen = HashSet::new();
    for row in points.axis_iter(Axis(0)) {
        seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if seen.len() >= enough {
            break;
        }
    }
    seen.len()
}

fn nearest_center(centers: &Array2<f64>, x: ndarray::ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.axis_iter(Axis(0)).enumerate() {
        let d = sq_dist(center, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sample_by_weight<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && target < w {
            return i;
        }
        target -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Greedy k-means++: each step draws `2 + ln k` candidates by squared distance and keeps
/// the one that lowers the total potential most.
fn kmeans_plus_plus<R: Rng>(points: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centers = Array2::zeros((k, points.ncols()));
    centers.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = points.axis_iter(Axis(0)).map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let pick = sample_by_weight(&dist, rng);
            let cand = points.row(pick);
            let next: Vec<f64> =
                points.axis_iter(Axis(0)).zip(&dist).map(|(r, &d)| d.min(sq_dist(r, cand))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, next, pick));
            }
        }
        let (_, next, pick) = best.expect("trials >= 2");
        centers.row_mut(c).assign(&points.row(pick));
        dist = next;
    }
    centers
}

/// All patch features of a dataset as rows (`sum N x C`).
pub fn patch_matrix(ds: &FeatureDataset) -> Array2<f64> {
    let views: Vec<Array2<f64>> = ds.records.iter().map(|r| r.features_f64().reversed_axes()).collect();
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    if refs.is_empty() {
        return Array2::zeros((0, ds.channels));
    }
    ndarray::concatenate(Axis(0), &refs).expect("shared channel count")
}

/// Clusters raw patch features with mini-batch k-means and scores the cluster ids
/// through the same matching pipeline as the model.
pub fn kmeans_baseline(ds: &FeatureDataset, k: usize, iterations: usize, seed: u64) -> Result<Metrics> {
    ground_truth_classes(ds)?;
    let points = patch_matrix(ds);
    let km = MiniBatchKMeans { k, batch_size: 1024, iterations, restarts: 3, seed };
    let centers = km.fit(&points)?;
    let assigned = MiniBatchKMeans::predict(&centers, &points);
    let mut offset = 0;
    let probs: Vec<Array2<f64>> = ds
        .records
        .iter()
        .map(|r| {
            let n = r.num_patches();
            let mut one_hot = Array2::zeros((k, n));
            for p in 0..n {
                one_hot[[assigned[offset + p], p]] = 1.0;
            }
            offset += n;
            one_hot
        })
        .collect();
    let conf = confusion_from_probs(ds, &probs, k, &EvalOptions::default())?;
    compute_metrics(&conf, &hungarian_match(&conf))
}
