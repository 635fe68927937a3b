//! Smoothness and data terms of the training energy, plus the δ-histogram diagnostic.
//!
//! Everything here is an explicit reference evaluation over full `N x M` matrices.
//! The trainer reuses [`closeness_matrix`] and evaluates the rest in product form.

use ndarray::{Array2, Axis};

use crate::model::AssignmentMap;
use crate::linalg::normalize_columns;
use crate::{Error, Result};

/// Row-zero-mean cosine similarities between the patches of two images (`N x M`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClosenessMatrix(pub Array2<f64>);

/// Thresholds subtracted from the closeness matrix before weighting the label penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessConfig {
    /// Within-image threshold.
    pub b1: f64,
    /// Across-image threshold.
    pub b2: f64,
}

impl SmoothnessConfig {
    /// Scene-style datasets.
    pub const SCENE: Self = Self { b1: 0.5, b2: -0.02 };
    /// Aerial-style datasets.
    pub const AERIAL: Self = Self { b1: 0.5, b2: 0.1 };
}

impl Default for SmoothnessConfig {
    fn default() -> Self {
        Self::SCENE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Raw sums over patches, pairs and images.
    #[default]
    Sum,
    /// Each term divided by its number of summands.
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(Error::config(format!("reduction must be `sum` or `mean`, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

/// Term weights and ablation switches of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveConfig {
    pub smoothness: SmoothnessConfig,
    pub reduction: Reduction,
    pub disable_data_term: bool,
    pub disable_across_term: bool,
    /// Disables both the within- and across-image smoothness terms.
    pub disable_smooth_term: bool,
}

impl ObjectiveConfig {
    pub(crate) fn within_on(&self) -> bool {
        !self.disable_smooth_term
    }

    pub(crate) fn across_on(&self) -> bool {
        !self.disable_smooth_term && !self.disable_across_term
    }

    pub(crate) fn data_on(&self) -> bool {
        !self.disable_data_term
    }

    /// Multiplier applied to one image's pair sum over `n x m` entries in a batch of `b`.
    pub(crate) fn pair_scale(&self, n: usize, m: usize, b: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / (n * m * b) as f64,
        }
    }

    pub(crate) fn data_scale(&self, n: usize, b: usize) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / (n * b) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub smooth_within: f64,
    pub smooth_across: f64,
    pub data: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(smooth_within: f64, smooth_across: f64, data: f64) -> Self {
        Self { smooth_within, smooth_across, data, total: smooth_within + smooth_across + data }
    }

    pub fn csv_header() -> &'static str {
        "iter,smooth_within,smooth_across,data,total"
    }

    pub fn csv_row(&self, iter: usize) -> String {
        format!("{iter},{},{},{},{}", self.smooth_within, self.smooth_across, self.data, self.total)
    }
}

/// Raw cosine similarities `X_a[:,p] . X_b[:,q] / (|X_a[:,p]| |X_b[:,q]|)`.
pub fn cosine_matrix(x_a: &Array2<f64>, x_b: &Array2<f64>) -> Result<Array2<f64>> {
    if x_a.nrows() != x_b.nrows() {
        return Err(Error::shape(format!("feature widths {} vs {}", x_a.nrows(), x_b.nrows())));
    }
    let (a, _) = normalize_columns(x_a, "features")?;
    let (b, _) = normalize_columns(x_b, "paired features")?;
    Ok(a.t().dot(&b))
}

/// Cosine similarities with each row's mean over its `M` partners subtracted.
pub fn closeness_matrix(x_a: &Array2<f64>, x_b: &Array2<f64>) -> Result<ClosenessMatrix> {
    let mut w = cosine_matrix(x_a, x_b)?;
    let means = w.mean_axis(Axis(1)).expect("M >= 1");
    for (mut row, m) in w.axis_iter_mut(Axis(0)).zip(means.iter()) {
        row -= *m;
    }
    Ok(ClosenessMatrix(w))
}

/// `δ_pq = 1 - cos(A_a[:,p], A_b[:,q])`, clamped to `[0, 1]`.
pub fn label_penalty(a_a: &AssignmentMap, a_b: &AssignmentMap) -> Result<Array2<f64>> {
    if a_a.0.nrows() != a_b.0.nrows() {
        return Err(Error::shape(format!("class counts {} vs {}", a_a.0.nrows(), a_b.0.nrows())));
    }
    let (na, _) = normalize_columns(&a_a.0, "assignments")?;
    let (nb, _) = normalize_columns(&a_b.0, "paired assignments")?;
    Ok(na.t().dot(&nb).mapv(|c| (1.0 - c).clamp(0.0, 1.0)))
}

/// `Σ_pq (W̄_pq - b) δ_pq`.
pub fn smoothness_loss(closeness: &ClosenessMatrix, delta: &Array2<f64>, b: f64) -> Result<f64> {
    if closeness.0.dim() != delta.dim() {
        return Err(Error::shape(format!(
            "closeness {:?} vs penalty {:?}",
            closeness.0.dim(),
            delta.dim()
        )));
    }
    Ok(closeness.0.iter().zip(delta.iter()).map(|(w, d)| (w - b) * d).sum())
}

/// Patch-wise cross entropy `-Σ_p log A^s[Y_p, p]` against constant pseudo-labels.
pub fn data_loss(a_s: &AssignmentMap, labels: &[usize]) -> Result<f64> {
    let (k, n) = a_s.0.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} patches", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("pseudo-label {bad} out of range for K = {k}")));
    }
    Ok(-labels.iter().enumerate().map(|(p, &y)| a_s.0[[y, p]].ln()).sum::<f64>())
}

/// One image's contribution to a batch objective.
#[derive(Debug, Clone, Copy)]
pub struct ImageTerms<'a> {
    pub features: &'a Array2<f64>,
    pub a_s: &'a AssignmentMap,
    pub a_t: &'a AssignmentMap,
    pub labels: &'a [usize],
}

/// Batch objective: within-image smoothness, across-image smoothness against
/// `images[pairing[i]]`, and the data term, each honoring the ablation switches.
pub fn total_loss(images: &[ImageTerms<'_>], pairing: &[usize], cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    validate_pairing(images.len(), pairing)?;
    let b = images.len();
    let (mut within, mut across, mut data) = (0.0, 0.0, 0.0);
    for (i, img) in images.iter().enumerate() {
        let n = img.features.ncols();
        if cfg.within_on() {
            let w = closeness_matrix(img.features, img.features)?;
            let delta = label_penalty(img.a_t, img.a_t)?;
            within += cfg.pair_scale(n, n, b) * smoothness_loss(&w, &delta, cfg.smoothness.b1)?;
        }
        if cfg.across_on() {
            let partner = &images[pairing[i]];
            let m = partner.features.ncols();
            if m != n {
                return Err(Error::shape(format!("paired images have {n} and {m} patches")));
            }
            let w = closeness_matrix(img.features, partner.features)?;
            let delta = label_penalty(img.a_t, partner.a_t)?;
            across += cfg.pair_scale(n, m, b) * smoothness_loss(&w, &delta, cfg.smoothness.b2)?;
        }
        if cfg.data_on() {
            data += cfg.data_scale(n, b) * data_loss(img.a_s, img.labels)?;
        }
    }
    Ok(LossBreakdown::new(within, across, data))
}

pub(crate) fn validate_pairing(len: usize, pairing: &[usize]) -> Result<()> {
    if pairing.len() != len {
        return Err(Error::shape(format!("pairing has {} entries for {len} images", pairing.len())));
    }
    let mut seen = vec![false; len];
    for &j in pairing {
        if j >= len || std::mem::replace(&mut seen[j], true) {
            return Err(Error::invalid("pairing is not a permutation of the batch"));
        }
    }
    Ok(())
}

/// Distribution of within-image label penalties over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaHistogram {
    /// `bins + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Pairs with `δ <= 0.1`.
    pub near_zero: u64,
    /// Pairs with `δ >= 0.9`.
    pub near_one: u64,
}

impl DeltaHistogram {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::config(format!("histogram needs >= 2 bins, got {bins}")));
        }
        Ok(Self {
            edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
            counts: vec![0; bins],
            near_zero: 0,
            near_one: 0,
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, delta: f64) {
        let bins = self.bins();
        let idx = ((delta * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        self.counts[idx] += 1;
        if delta <= 0.1 {
            self.near_zero += 1;
        }
        if delta >= 0.9 {
            self.near_one += 1;
        }
    }

    pub fn merge(&mut self, other: &DeltaHistogram) -> Result<()> {
        if other.bins() != self.bins() {
            return Err(Error::shape("histograms have different bin counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.near_zero += other.near_zero;
        self.near_one += other.near_one;
        Ok(())
    }

    pub fn frac_near_zero(&self) -> f64 {
        self.near_zero as f64 / self.total().max(1) as f64
    }

    pub fn frac_near_one(&self) -> f64 {
        self.near_one as f64 / self.total().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

/// Histogram of all `N x N` within-image penalties of one assignment map, self pairs included.
pub fn delta_histogram(a_t: &AssignmentMap, bins: usize) -> Result<DeltaHistogram> {
    let mut hist = DeltaHistogram::new(bins)?;
    for &d in label_penalty(a_t, a_t)?.iter() {
        hist.add(d);
    }
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn amap(a: Array2<f64>) -> AssignmentMap {
        AssignmentMap(a)
    }

    #[test]
    fn orthonormal_pair_closeness() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cosine_matrix(&x, &x).unwrap(), array![[1.0, 0.0], [0.0, 1.0]]);
        let w = closeness_matrix(&x, &x).unwrap();
        assert_eq!(w.0, array![[0.5, -0.5], [-0.5, 0.5]]);
    }

    #[test]
    fn identical_columns_give_zero_closeness() {
        let x = array![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        assert!(cosine_matrix(&x, &x).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(closeness_matrix(&x, &x).unwrap().0.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn zero_feature_column_rejected() {
        let x = array![[1.0, 0.0], [1.0, 0.0]];
        assert!(matches!(closeness_matrix(&x, &x), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn penalty_values() {
        let e1 = amap(array![[1.0], [0.0]]);
        let e2 = amap(array![[0.0], [1.0]]);
        let half = amap(array![[0.5], [0.5]]);
        assert_eq!(label_penalty(&e1, &e1).unwrap()[[0, 0]], 0.0);
        assert_eq!(label_penalty(&e1, &e2).unwrap()[[0, 0]], 1.0);
        let d = label_penalty(&half, &e1).unwrap()[[0, 0]];
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert!((d - 0.29289).abs() < 1e-5);
    }

    #[test]
    fn zero_penalty_means_zero_loss() {
        let w = ClosenessMatrix(array![[0.3, -0.3], [0.1, -0.1]]);
        assert_eq!(smoothness_loss(&w, &Array2::zeros((2, 2)), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn disagreement_below_threshold_is_rewarded() {
        let w = ClosenessMatrix(array![[0.2]]);
        assert!(smoothness_loss(&w, &array![[1.0]], 0.5).unwrap() < 0.0);
    }

    #[test]
    fn three_patch_double_loop() {
        let w = array![[0.5, -0.25, -0.25], [0.125, 0.25, -0.375], [-0.5, 0.0, 0.5]];
        let d = array![[0.0, 0.75, 0.5], [0.75, 0.0, 0.25], [0.5, 0.25, 0.0]];
        let b = 0.125;
        let mut expect = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                expect += (w[[p, q]] - b) * d[[p, q]];
            }
        }
        let got = smoothness_loss(&ClosenessMatrix(w), &d, b).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!(smoothness_loss(&ClosenessMatrix(Array2::zeros((2, 2))), &Array2::zeros((3, 3)), 0.0).is_err());
    }

    #[test]
    fn data_loss_values() {
        let sharp = amap(array![[1.0 - 1e-7, 1e-7], [1e-7, 1.0 - 1e-7]]);
        assert!(data_loss(&sharp, &[0, 1]).unwrap() < 1e-6);

        let uniform = amap(Array2::from_elem((4, 1), 0.25));
        assert!((data_loss(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);

        let a = amap(array![[0.7, 0.4], [0.3, 0.6]]);
        let expect = -(0.3f64.ln() + 0.4f64.ln());
        assert!((data_loss(&a, &[1, 0]).unwrap() - expect).abs() < 1e-12);

        assert!(data_loss(&a, &[2, 0]).is_err());
        assert!(data_loss(&a, &[0]).is_err());
    }

    #[test]
    fn histogram_identical_columns() {
        let a = amap(Array2::from_shape_fn((3, 5), |(k, _)| [0.2, 0.3, 0.5][k]));
        let h = delta_histogram(&a, 10).unwrap();
        assert_eq!(h.counts[0], 25);
        assert_eq!(h.total(), 25);
        assert_eq!(h.near_zero, 25);
    }

    #[test]
    fn histogram_alternating_one_hots() {
        // 6 columns alternating e1, e2: 18 same-label pairs (δ = 0), 18 opposite (δ = 1)
        let a = amap(Array2::from_shape_fn((2, 6), |(k, p)| if p % 2 == k { 1.0 } else { 0.0 }));
        let h = delta_histogram(&a, 4).unwrap();
        let mut zeros = 0;
        for p in 0..6 {
            for q in 0..6 {
                if p % 2 == q % 2 {
                    zeros += 1;
                }
            }
        }
        assert_eq!(zeros, 18);
        assert_eq!(h.counts, vec![18, 0, 0, 18]);
        assert_eq!((h.near_zero, h.near_one), (18, 18));
        assert!(DeltaHistogram::new(1).is_err());
    }

    #[test]
    fn pairing_must_be_permutation() {
        assert!(validate_pairing(3, &[1, 2, 0]).is_ok());
        assert!(validate_pairing(3, &[1, 1, 0]).is_err());
        assert!(validate_pairing(3, &[1, 0]).is_err());
    }
}
