//! Gradient engine, Adam and the training loop.
//!
//! The graph is fixed and shallow, so gradients are derived by hand per stage and
//! chained explicitly. Stop-gradient routing:
//!
//! - smoothness terms reach the projector only, through `Z̄ -> A^t`; teacher prototypes are constant;
//! - the data term reaches the student prototypes only; `Z̄` and the pseudo-labels are constants.
//!
//! Pair terms `Σ_pq (W̄_pq - b) δ_pq` are evaluated in product form, never materializing
//! the `N x M` matrices. With `X̂`, `Â` the column-normalized features and teacher assignments,
//! `r = X̂ᵀ Σ_q X̂'_q / M` the closeness row means and `S = Σ_p Â_p`:
//!
//! ```text
//! E = -b N M - <X̂ Âᵀ, X̂' Â'ᵀ> + Σ_p r_p (Â_p · S') + b (S · S')
//! ```

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::feature_store::{make_batches, FeatureDataset};
use crate::linalg::{
    normalize_columns, normalize_columns_backward, normalize_rows_backward, softmax_columns_backward,
};
use crate::model::{self, ema_update, silu_grad, ModelState, ProjectorParams};
use crate::objective::{validate_pairing, LossBreakdown, ObjectiveConfig, Reduction, SmoothnessConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_projector: f64,
    pub lr_prototypes: f64,
    pub tau: f64,
    pub alpha: f64,
    pub b1: f64,
    pub b2: f64,
    pub dim_d: usize,
    pub k: usize,
    /// MLP hidden width; `None` uses the feature channel count.
    pub hidden: Option<usize>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub reduction: Reduction,
    pub disable_data_term: bool,
    pub disable_across_term: bool,
    pub disable_smooth_term: bool,
    /// Runs per-image work on the calling thread only.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 32,
            lr_projector: 1e-4,
            lr_prototypes: 5e-4,
            tau: 0.1,
            alpha: 0.998,
            b1: SmoothnessConfig::SCENE.b1,
            b2: SmoothnessConfig::SCENE.b2,
            dim_d: 64,
            k: 27,
            hidden: None,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            reduction: Reduction::Sum,
            disable_data_term: false,
            disable_across_term: false,
            disable_smooth_term: false,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "iterations", "batch_size", "lr_projector", "lr_prototypes", "tau", "alpha", "b1", "b2",
        "dim_d", "k", "hidden", "seed", "adam_beta1", "adam_beta2", "adam_eps", "reduction",
        "disable_data_term", "disable_across_term", "disable_smooth_term", "deterministic",
    ];

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            smoothness: SmoothnessConfig { b1: self.b1, b2: self.b2 },
            reduction: self.reduction,
            disable_data_term: self.disable_data_term,
            disable_across_term: self.disable_across_term,
            disable_smooth_term: self.disable_smooth_term,
        }
    }

    /// Sets one field from its textual `key = value` form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr_projector" => self.lr_projector = num(key, value)?,
            "lr_prototypes" => self.lr_prototypes = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "b1" => self.b1 = num(key, value)?,
            "b2" => self.b2 = num(key, value)?,
            "dim_d" => self.dim_d = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "hidden" => self.hidden = Some(num(key, value)?),
            "seed" => self.seed = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "reduction" => self.reduction = value.parse()?,
            "disable_data_term" => self.disable_data_term = num(key, value)?,
            "disable_across_term" => self.disable_across_term = num(key, value)?,
            "disable_smooth_term" => self.disable_smooth_term = num(key, value)?,
            "deterministic" => self.deterministic = num(key, value)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in [`Self::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let hidden = self.hidden.map_or_else(|| "channels".to_string(), |h| h.to_string());
        let values = [
            self.iterations.to_string(),
            self.batch_size.to_string(),
            self.lr_projector.to_string(),
            self.lr_prototypes.to_string(),
            self.tau.to_string(),
            self.alpha.to_string(),
            self.b1.to_string(),
            self.b2.to_string(),
            self.dim_d.to_string(),
            self.k.to_string(),
            hidden,
            self.seed.to_string(),
            self.adam_beta1.to_string(),
            self.adam_beta2.to_string(),
            self.adam_eps.to_string(),
            self.reduction.to_string(),
            self.disable_data_term.to_string(),
            self.disable_across_term.to_string(),
            self.disable_smooth_term.to_string(),
            self.deterministic.to_string(),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(msg.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.k < 1 || self.dim_d < 1 || self.hidden == Some(0) {
            return bad("k, dim_d and hidden must be positive");
        }
        if !(self.lr_projector >= 0.0 && self.lr_prototypes >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam constants must satisfy 0 <= beta < 1 and eps > 0");
        }
        if !(self.b1.is_finite() && self.b2.is_finite()) {
            return bad("b1 and b2 must be finite");
        }
        Ok(())
    }
}

/// Gradients for the trainable tensors. Teacher prototypes and features have no slots.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub projector: ProjectorParams,
    pub student: Array2<f64>,
}

impl GradientSet {
    pub fn zeros_like(state: &ModelState) -> Self {
        let p = &state.projector;
        Self {
            projector: ProjectorParams::zeros(p.channels(), p.hidden(), p.dim_d()),
            student: Array2::zeros(state.student.0.dim()),
        }
    }
}

/// One image's pair-term inputs: normalized features and normalized teacher assignments.
struct PairSide<'a> {
    x_hat: ArrayView2<'a, f64>,
    a_hat: ArrayView2<'a, f64>,
}

/// `Σ_pq (W̄_pq - b)(1 - Â_p·Â'_q)` and its gradients w.r.t. `Â` and `Â'`.
fn pair_term(a: &PairSide<'_>, b: &PairSide<'_>, thresh: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let n = a.x_hat.ncols() as f64;
    let m = b.x_hat.ncols() as f64;
    let g_a = a.x_hat.dot(&a.a_hat.t()); // C x K
    let g_b = b.x_hat.dot(&b.a_hat.t());
    let s_a = a.a_hat.sum_axis(Axis(1)); // K
    let s_b = b.a_hat.sum_axis(Axis(1));
    let row_means = a.x_hat.t().dot(&b.x_hat.sum_axis(Axis(1))) / m; // N
    let r_a = a.a_hat.dot(&row_means); // Σ_p r_p Â_p

    let cross = (&g_a * &g_b).sum();
    let loss = -thresh * n * m - cross + r_a.dot(&s_b) + thresh * s_a.dot(&s_b);

    // dE/dÂ = -G_bᵀ X̂ + S' (r + b)ᵀ
    let mut d_a = -g_b.t().dot(&a.x_hat);
    let shifted = row_means.mapv(|r| r + thresh);
    d_a += &(s_b.view().insert_axis(Axis(1)).dot(&shifted.view().insert_axis(Axis(0))));
    // dE/dÂ' = -G_aᵀ X̂' + (R + b S) 1ᵀ
    let mut d_b = -g_a.t().dot(&b.x_hat);
    let col = &r_a + &(&s_a * thresh);
    d_b += &col.view().insert_axis(Axis(1));
    (loss, d_a, d_b)
}

/// Per-image results of the pair terms, merged in a fixed order afterwards.
struct ImagePartial {
    within: f64,
    across: f64,
    grad_self: Array2<f64>,
    grad_partner: Array2<f64>,
}

/// Loss breakdown and gradients of the batch objective.
///
/// `features` are the raw `C x N` matrices of the batch; `normed` may carry their
/// column-normalized versions to skip recomputation.
pub fn backward(
    features: &[&Array2<f64>],
    pairing: &[usize],
    state: &ModelState,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    let normed = features
        .iter()
        .map(|x| normalize_columns(x, "features").map(|(xh, _)| xh))
        .collect::<Result<Vec<_>>>()?;
    let normed_refs: Vec<&Array2<f64>> = normed.iter().collect();
    backward_with_normed(features, &normed_refs, pairing, state, cfg, false)
}

fn backward_with_normed(
    features: &[&Array2<f64>],
    normed: &[&Array2<f64>],
    pairing: &[usize],
    state: &ModelState,
    cfg: &ObjectiveConfig,
    parallel: bool,
) -> Result<(LossBreakdown, GradientSet)> {
    let b = features.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    validate_pairing(b, pairing)?;
    let n = features[0].ncols();
    if features.iter().any(|x| x.ncols() != n) {
        return Err(Error::shape("all images in a batch must share one patch count"));
    }

    // Stack the batch column-wise so the projector runs as one product.
    let views: Vec<_> = features.iter().map(|x| x.view()).collect();
    let x = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))?;
    let fwd = model::forward(state, &x)?;

    let mut a_hat_norms = None;
    let smooth_on = cfg.within_on() || cfg.across_on();
    let a_hat = if smooth_on {
        let (a_hat, norms) = normalize_columns(&fwd.a_t.0, "teacher assignments")?;
        a_hat_norms = Some(norms);
        a_hat
    } else {
        Array2::zeros((0, 0))
    };

    let side = |i: usize| PairSide {
        x_hat: normed[i].view(),
        a_hat: a_hat.slice(s![.., i * n..(i + 1) * n]),
    };
    let per_image = |i: usize| -> ImagePartial {
        let k = state.dim_k();
        let scale = cfg.pair_scale(n, n, b);
        let mut out = ImagePartial {
            within: 0.0,
            across: 0.0,
            grad_self: Array2::zeros((k, n)),
            grad_partner: Array2::zeros((k, n)),
        };
        if cfg.within_on() {
            let me = side(i);
            let (loss, da, db) = pair_term(&me, &me, cfg.smoothness.b1);
            out.within = scale * loss;
            out.grad_self = (da + db) * scale;
        }
        if cfg.across_on() {
            let (loss, da, db) = pair_term(&side(i), &side(pairing[i]), cfg.smoothness.b2);
            out.across = scale * loss;
            out.grad_self.scaled_add(scale, &da);
            out.grad_partner = db * scale;
        }
        out
    };
    let partials: Vec<ImagePartial> = if !smooth_on {
        Vec::new()
    } else if parallel {
        (0..b).into_par_iter().map(per_image).collect()
    } else {
        (0..b).map(per_image).collect()
    };

    let (mut within, mut across) = (0.0, 0.0);
    let mut grad_a_hat = Array2::<f64>::zeros(if smooth_on { a_hat.dim() } else { (0, 0) });
    for (i, part) in partials.iter().enumerate() {
        within += part.within;
        across += part.across;
        grad_a_hat.slice_mut(s![.., i * n..(i + 1) * n]).scaled_add(1.0, &part.grad_self);
        let j = pairing[i];
        grad_a_hat.slice_mut(s![.., j * n..(j + 1) * n]).scaled_add(1.0, &part.grad_partner);
    }

    let mut grads = GradientSet::zeros_like(state);

    // Smoothness path: Â -> A^t -> logits -> Z̄ -> Z -> projector.
    if let Some(norms) = a_hat_norms {
        let grad_a_t = normalize_columns_backward(&a_hat, &norms, &grad_a_hat);
        let grad_logits = softmax_columns_backward(&fwd.a_t.0, &grad_a_t) / state.tau;
        let grad_z_bar = fwd.teacher_bar.t().dot(&grad_logits);
        let grad_z = normalize_columns_backward(&fwd.z_bar, &fwd.z_norms, &grad_z_bar);
        grads.projector = projector_backward(&state.projector, &x, &fwd.projector_cache, &grad_z);
    }

    // Data path: pseudo-labels and Z̄ are constants; only P^s receives gradient.
    let mut data = 0.0;
    if cfg.data_on() {
        let scale = cfg.data_scale(n, b);
        let mut grad_logits = fwd.a_s.0.clone();
        for (p, &y) in fwd.labels.iter().enumerate() {
            data -= fwd.a_s.0[[y, p]].ln();
            grad_logits[[y, p]] -= 1.0;
        }
        data *= scale;
        grad_logits *= scale;
        let grad_student_bar = grad_logits.dot(&fwd.z_bar.t());
        grads.student = normalize_rows_backward(&fwd.student_bar, &fwd.student_norms, &grad_student_bar);
    }

    let loss = LossBreakdown::new(within, across, data);
    Ok((loss, grads))
}

fn projector_backward(
    params: &ProjectorParams,
    x: &Array2<f64>,
    cache: &model::ProjectorCache,
    grad_z: &Array2<f64>,
) -> ProjectorParams {
    let linear_w = grad_z.dot(&x.t());
    let linear_b = grad_z.sum_axis(Axis(1));
    let mlp_w2 = grad_z.dot(&cache.hidden.t());
    let mlp_b2 = linear_b.clone();
    let mut grad_hidden = params.mlp_w2.t().dot(grad_z);
    grad_hidden.zip_mut_with(&cache.hidden_pre, |g, &u| *g *= silu_grad(u));
    let mlp_w1 = grad_hidden.dot(&x.t());
    let mlp_b1 = grad_hidden.sum_axis(Axis(1));
    ProjectorParams { linear_w, linear_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2 }
}

/// Adam with bias correction over a fixed list of flat parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One update. `lrs[i]` is the learning rate for tensor `i`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lrs: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() {
            return Err(Error::shape("Adam: params, grads and learning rates differ in count"));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::shape("Adam: tensor count changed between steps"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(Error::shape(format!("Adam: tensor {i} length mismatch")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lrs[i] * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to the projector (group `lr_projector`) and student
/// prototypes (group `lr_prototypes`).
pub fn adam_step(state: &mut ModelState, grads: &GradientSet, opt: &mut Adam, lr_projector: f64, lr_prototypes: f64) -> Result<()> {
    let p = &mut state.projector;
    let g = &grads.projector;
    if g.linear_w.dim() != p.linear_w.dim() || grads.student.dim() != state.student.0.dim() {
        return Err(Error::shape("gradient set does not match model"));
    }
    let mut params: Vec<&mut [f64]> = vec![
        p.linear_w.as_slice_mut().expect("standard layout"),
        p.linear_b.as_slice_mut().expect("standard layout"),
        p.mlp_w1.as_slice_mut().expect("standard layout"),
        p.mlp_b1.as_slice_mut().expect("standard layout"),
        p.mlp_w2.as_slice_mut().expect("standard layout"),
        p.mlp_b2.as_slice_mut().expect("standard layout"),
        state.student.0.as_slice_mut().expect("standard layout"),
    ];
    let grads: Vec<&[f64]> = vec![
        g.linear_w.as_slice().expect("standard layout"),
        g.linear_b.as_slice().expect("standard layout"),
        g.mlp_w1.as_slice().expect("standard layout"),
        g.mlp_b1.as_slice().expect("standard layout"),
        g.mlp_w2.as_slice().expect("standard layout"),
        g.mlp_b2.as_slice().expect("standard layout"),
        grads.student.as_slice().expect("standard layout"),
    ];
    let mut lrs = [lr_projector; 7];
    lrs[6] = lr_prototypes;
    opt.step(&mut params, &grads, &lrs)
}

/// Random partner for each image. A permutation with a fixed point is redrawn once,
/// and the second draw is accepted as is.
pub fn pair_batch<R: rand::Rng>(len: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(rng);
    if len >= 2 && perm.iter().enumerate().any(|(i, &j)| i == j) {
        perm.shuffle(rng);
    }
    perm
}

/// Per-iteration loss rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LossBreakdown>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::csv_header());
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&row.csv_row(i + 1));
            out.push('\n');
        }
        out
    }
}

/// Stateful training loop over one dataset.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    state: ModelState,
    opt: Adam,
    features: Vec<Array2<f64>>,
    normed: Vec<Array2<f64>>,
    ds_len: usize,
    epoch: u64,
    queue: std::collections::VecDeque<Vec<usize>>,
    pair_rng: ChaCha8Rng,
    log: TrainLog,
    _ds: std::marker::PhantomData<&'a FeatureDataset>,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a FeatureDataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if ds.len() < 2 {
            return Err(Error::invalid("training needs at least two images"));
        }
        let hidden = cfg.hidden.unwrap_or(ds.channels);
        let state = ModelState::init(ds.channels, hidden, cfg.dim_d, cfg.k, cfg.tau, cfg.seed)?;
        Self::resume(ds, cfg, state)
    }

    /// Continues from an existing state; optimizer moments start fresh.
    pub fn resume(ds: &'a FeatureDataset, cfg: TrainConfig, state: ModelState) -> Result<Self> {
        cfg.validate()?;
        if state.channels() != ds.channels {
            return Err(Error::shape(format!(
                "model expects C = {}, dataset has C = {}",
                state.channels(),
                ds.channels
            )));
        }
        let features: Vec<Array2<f64>> = ds.records.iter().map(|r| r.features_f64()).collect();
        let normed = features
            .iter()
            .map(|x| normalize_columns(x, "features").map(|(xh, _)| xh))
            .collect::<Result<Vec<_>>>()?;
        let opt = Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        let pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0FBA_11ED);
        Ok(Self {
            cfg,
            state,
            opt,
            features,
            normed,
            ds_len: ds.len(),
            epoch: 0,
            queue: Default::default(),
            pair_rng,
            log: TrainLog::default(),
            _ds: std::marker::PhantomData,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        while self.queue.is_empty() {
            let seed = self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.epoch);
            self.queue.extend(make_batches(self.ds_len, self.cfg.batch_size, seed)?);
            self.epoch += 1;
        }
        Ok(self.queue.pop_front().expect("non-empty"))
    }

    /// One iteration: batch, forward, backward, Adam, teacher EMA.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch = self.next_batch()?;
        let pairing = pair_batch(batch.len(), &mut self.pair_rng);
        let feats: Vec<&Array2<f64>> = batch.iter().map(|&i| &self.features[i]).collect();
        let normed: Vec<&Array2<f64>> = batch.iter().map(|&i| &self.normed[i]).collect();
        let iteration = self.state.iteration as usize + 1;
        let (loss, grads) = backward_with_normed(
            &feats,
            &normed,
            &pairing,
            &self.state,
            &self.cfg.objective(),
            !self.cfg.deterministic,
        )?;
        for (term, v) in [
            ("smooth_within", loss.smooth_within),
            ("smooth_across", loss.smooth_across),
            ("data", loss.data),
        ] {
            if !v.is_finite() {
                return Err(Error::Diverged { term, iteration });
            }
        }
        adam_step(&mut self.state, &grads, &mut self.opt, self.cfg.lr_projector, self.cfg.lr_prototypes)?;
        self.state.teacher = ema_update(&self.state.teacher, &self.state.student, self.cfg.alpha)?;
        self.state.iteration += 1;
        self.log.rows.push(loss);
        Ok(loss)
    }

    pub fn run(mut self) -> Result<(ModelState, TrainLog)> {
        for _ in 0..self.cfg.iterations {
            self.step()?;
        }
        Ok((self.state, self.log))
    }
}

/// Trains from a fresh initialization for `cfg.iterations` steps.
pub fn train(ds: &FeatureDataset, cfg: &TrainConfig) -> Result<(ModelState, TrainLog)> {
    Trainer::new(ds, cfg.clone())?.run()
}
