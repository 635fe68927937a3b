//! Synthetic patch features with known segment structure.
//!
//! Each image is a Voronoi partition of its patch grid; every cell gets a class, and
//! each patch feature is the unit-normalized sum of its class mean and Gaussian noise.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::feature_store::{FeatureDataset, FeatureRecord, LabelMap};
use crate::{Error, Result};

const MEAN_ATTEMPTS: usize = 10_000;
const COVER_ATTEMPTS: usize = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_images: usize,
    pub k_true: usize,
    pub channels: usize,
    /// Per-coordinate standard deviation of the additive noise.
    pub noise_sigma: f64,
    /// Upper bound on the pairwise cosine between class means.
    pub min_center_cos: f64,
    /// Expected segment diameter, in patches.
    pub region_scale: f64,
    /// Gram-Schmidt the class means so they are mutually orthogonal.
    pub orthogonal_means: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_h: 16,
            grid_w: 16,
            n_images: 50,
            k_true: 4,
            channels: 64,
            noise_sigma: 0.1,
            min_center_cos: 0.2,
            region_scale: 8.0,
            orthogonal_means: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_true < 2 || self.k_true > self.channels {
            return Err(Error::config(format!(
                "k_true must satisfy 2 <= k_true <= channels, got k_true = {} with {} channels",
                self.k_true, self.channels
            )));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::config("grid dimensions must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be finite and >= 0"));
        }
        if !(-1.0..1.0).contains(&self.min_center_cos) {
            return Err(Error::config("min_center_cos must lie in [-1, 1)"));
        }
        if !(self.region_scale > 0.0) {
            return Err(Error::config("region_scale must be > 0"));
        }
        if self.site_count() < self.k_true {
            return Err(Error::config(format!(
                "region_scale {} leaves {} Voronoi sites, fewer than k_true = {}",
                self.region_scale,
                self.site_count(),
                self.k_true
            )));
        }
        Ok(())
    }

    pub fn site_count(&self) -> usize {
        ((self.grid_h * self.grid_w) as f64 / (self.region_scale * self.region_scale)).ceil() as usize
    }
}

/// Generated dataset plus the unit-norm class means (`k_true x C`) used to build it.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: FeatureDataset,
    pub class_means: Array2<f64>,
}

pub fn generate(cfg: &SynthConfig) -> Result<FeatureDataset> {
    generate_detailed(cfg).map(|out| out.dataset)
}

pub fn generate_detailed(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class_means = if cfg.orthogonal_means {
        if cfg.min_center_cos < 0.0 {
            return Err(Error::config("orthogonal means cannot satisfy a negative cosine bound"));
        }
        orthogonal_means(cfg.k_true, cfg.channels, &mut rng)
    } else {
        sample_means(cfg.k_true, cfg.channels, cfg.min_center_cos, &mut rng)?
    };

    let records = (0..cfg.n_images)
        .map(|i| {
            // each image draws from its own stream so images are independent of one another
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            generate_image(cfg, &class_means, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthOutput { dataset: FeatureDataset::new(cfg.channels, records)?, class_means })
}

fn random_unit<R: Rng>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn sample_means<R: Rng>(k: usize, dim: usize, max_cos: f64, rng: &mut R) -> Result<Array2<f64>> {
    let mut means: Vec<Array1<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while means.len() < k {
        attempts += 1;
        if attempts > MEAN_ATTEMPTS {
            return Err(Error::config(format!(
                "could not place {k} class means with pairwise cosine <= {max_cos} in {dim} \
                 dimensions; use more channels or a looser bound"
            )));
        }
        let v = random_unit(dim, rng);
        if means.iter().all(|m| m.dot(&v) <= max_cos) {
            means.push(v);
        }
    }
    let views: Vec<_> = means.iter().map(|m| m.view().insert_axis(Axis(0))).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal widths"))
}

fn orthogonal_means<R: Rng>(k: usize, dim: usize, rng: &mut R) -> Array2<f64> {
    let mut means = Array2::<f64>::zeros((k, dim));
    let mut i = 0;
    while i < k {
        let mut v = random_unit(dim, rng);
        for j in 0..i {
            let prev = means.row(j).to_owned();
            let proj = prev.dot(&v);
            v.scaled_add(-proj, &prev);
        }
        let n = v.dot(&v).sqrt();
        if n < 1e-6 {
            continue;
        }
        means.row_mut(i).assign(&(v / n));
        i += 1;
    }
    means
}

fn voronoi_cells<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<usize> {
    let sites: Vec<(f64, f64)> = (0..cfg.site_count())
        .map(|_| (rng.random_range(0.0..cfg.grid_h as f64), rng.random_range(0.0..cfg.grid_w as f64)))
        .collect();
    let mut cells = Vec::with_capacity(cfg.grid_h * cfg.grid_w);
    for y in 0..cfg.grid_h {
        for x in 0..cfg.grid_w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (s, &(sy, sx)) in sites.iter().enumerate() {
                let d = (py - sy).powi(2) + (px - sx).powi(2);
                if d < best.0 {
                    best = (d, s);
                }
            }
            cells.push(best.1);
        }
    }
    cells
}

fn generate_image<R: Rng>(cfg: &SynthConfig, means: &Array2<f64>, rng: &mut R) -> Result<FeatureRecord> {
    let n = cfg.grid_h * cfg.grid_w;
    let mut labels = None;
    for _ in 0..COVER_ATTEMPTS {
        let cells = voronoi_cells(cfg, rng);
        let site_class: Vec<usize> = (0..cfg.site_count()).map(|_| rng.random_range(0..cfg.k_true)).collect();
        let candidate: Vec<usize> = cells.iter().map(|&c| site_class[c]).collect();
        let mut present = vec![false; cfg.k_true];
        candidate.iter().for_each(|&c| present[c] = true);
        if present.iter().all(|&p| p) {
            labels = Some(candidate);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        Error::config("could not cover every class in an image; lower region_scale or k_true")
    })?;

    let mut features = vec![0f32; cfg.channels * n];
    let mut column = Array1::<f64>::zeros(cfg.channels);
    for (p, &class) in labels.iter().enumerate() {
        column.assign(&means.row(class));
        column.mapv_inplace(|m| m + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal));
        let norm = column.dot(&column).sqrt();
        for c in 0..cfg.channels {
            features[c * n + p] = (column[c] / norm) as f32;
        }
    }
    let label = LabelMap::new(cfg.grid_h, cfg.grid_w, labels.iter().map(|&l| l as i32).collect())?;
    FeatureRecord::new(cfg.channels, cfg.grid_h, cfg.grid_w, features, Some(label))
}
