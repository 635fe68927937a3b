//! Fully connected CRF refinement by mean-field inference.
//!
//! Pairwise potentials are an appearance (bilateral) kernel plus a spatial smoothness
//! kernel with Potts compatibility. Messages are computed exactly over all pixel pairs,
//! so images are downscaled before refinement; see [`refine_downscaled`].

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;

use crate::{Error, Result};

/// Largest side length refined at full cost.
pub const MAX_WORKING_SIDE: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfParams {
    pub iterations: usize,
    pub w_appearance: f64,
    pub w_smooth: f64,
    /// Appearance kernel spatial bandwidth, pixels.
    pub theta_alpha: f64,
    /// Appearance kernel color bandwidth, intensity units (0..255).
    pub theta_beta: f64,
    /// Smoothness kernel spatial bandwidth, pixels.
    pub theta_gamma: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self { iterations: 10, w_appearance: 10.0, w_smooth: 3.0, theta_alpha: 80.0, theta_beta: 13.0, theta_gamma: 3.0 }
    }
}

impl CrfParams {
    pub const KEYS: &'static [&'static str] =
        &["crf_iterations", "w_appearance", "w_smooth", "theta_alpha", "theta_beta", "theta_gamma"];

    pub fn validate(&self) -> Result<()> {
        let positive = [self.theta_alpha, self.theta_beta, self.theta_gamma].iter().all(|&t| t > 0.0);
        let weights = self.w_appearance >= 0.0 && self.w_smooth >= 0.0;
        if !positive || !weights {
            return Err(Error::config("CRF bandwidths must be > 0 and weights >= 0"));
        }
        Ok(())
    }

    /// Spatial bandwidths rescaled for a resized image.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { theta_alpha: self.theta_alpha * factor, theta_gamma: self.theta_gamma * factor, ..*self }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
        };
        match key {
            "crf_iterations" => {
                self.iterations = value.parse().map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))?
            }
            "w_appearance" => self.w_appearance = parse(value)?,
            "w_smooth" => self.w_smooth = parse(value)?,
            "theta_alpha" => self.theta_alpha = parse(value)?,
            "theta_beta" => self.theta_beta = parse(value)?,
            "theta_gamma" => self.theta_gamma = parse(value)?,
            other => return Err(Error::config(format!("unknown CRF key `{other}`"))),
        }
        Ok(())
    }
}

fn check_inputs(probs: &Array3<f64>, image: &Array3<f64>) -> Result<()> {
    let (_, h, w) = probs.dim();
    if image.dim() != (3, h, w) {
        return Err(Error::shape(format!("image {:?} does not match probabilities {h}x{w}", image.dim())));
    }
    for y in 0..h {
        for x in 0..w {
            let col = probs.slice(ndarray::s![.., y, x]);
            let sum: f64 = col.sum();
            if col.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("pixel ({y}, {x}) is not a probability distribution")));
            }
        }
    }
    Ok(())
}

/// Mean-field refinement of `probs` (`K x H x W`) guided by `image` (`3 x H x W`).
///
/// Each round computes, per label, the kernel-weighted sum of the other pixels'
/// marginals and sets `Q_l(p) ∝ probs_l(p) · exp(message_l(p))`. Zero-probability labels stay zero.
pub fn refine(probs: &Array3<f64>, image: &Array3<f64>, params: &CrfParams) -> Result<Array3<f64>> {
    params.validate()?;
    check_inputs(probs, image)?;
    if params.iterations == 0 {
        return Ok(probs.clone());
    }
    let (k, h, w) = probs.dim();
    let npix = h * w;
    let unary = probs.to_shape((k, npix)).expect("contiguous").mapv(f64::ln);
    let colors = image.to_shape((3, npix)).expect("contiguous").to_owned();

    let table = |theta: f64, len: usize| -> Vec<f64> {
        (0..len).map(|d| (-((d * d) as f64) / (2.0 * theta * theta)).exp()).collect()
    };
    let side = h.max(w);
    let (ay, ax) = (table(params.theta_alpha, side), table(params.theta_alpha, side));
    let (gy, gx) = (table(params.theta_gamma, side), table(params.theta_gamma, side));
    let inv_beta = 1.0 / (2.0 * params.theta_beta * params.theta_beta);

    let kernel = |p: usize, q: usize| -> f64 {
        let (py, px, qy, qx) = (p / w, p % w, q / w, q % w);
        let (dy, dx) = (py.abs_diff(qy), px.abs_diff(qx));
        let mut value = params.w_smooth * gy[dy] * gx[dx];
        if params.w_appearance > 0.0 {
            let dc: f64 = (0..3).map(|c| (colors[[c, p]] - colors[[c, q]]).powi(2)).sum();
            value += params.w_appearance * ay[dy] * ax[dx] * (-dc * inv_beta).exp();
        }
        value
    };

    let mut q = probs.to_shape((k, npix)).expect("contiguous").to_owned();
    for _ in 0..params.iterations {
        let q_t = q.t().as_standard_layout().to_owned(); // npix x k, row per pixel
        let rows: Vec<Vec<f64>> = (0..npix)
            .into_par_iter()
            .map(|p| {
                let mut msg = vec![0.0; k];
                for other in 0..npix {
                    if other == p {
                        continue;
                    }
                    let kv = kernel(p, other);
                    let qo = q_t.row(other);
                    for l in 0..k {
                        msg[l] += kv * qo[l];
                    }
                }
                let logits: Vec<f64> = (0..k).map(|l| unary[[l, p]] + msg[l]).collect();
                let max = logits.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / z).collect()
            })
            .collect();
        for (p, row) in rows.into_iter().enumerate() {
            for (l, v) in row.into_iter().enumerate() {
                q[[l, p]] = v;
            }
        }
    }
    Ok(q.into_shape_with_order((k, h, w)).expect("same size"))
}

/// Bilinear resize of each channel (half-pixel centers, edge clamped).
pub fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let mut out = Array3::zeros((c, out_h, out_w));
    let ys: Vec<_> = (0..out_h).map(|y| source_coord(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    for ch in 0..c {
        let plane = src.index_axis(Axis(0), ch);
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[[y0, x0]] * (1.0 - fx) + plane[[y0, x1]] * fx;
                let bottom = plane[[y1, x0]] * (1.0 - fx) + plane[[y1, x1]] * fx;
                out[[ch, y, x]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Neighbouring source indices and the weight of the second one.
pub(crate) fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Refines at a working resolution whose longer side is at most `max_side`, then
/// resizes the marginals back. Spatial bandwidths shrink with the image.
pub fn refine_downscaled(probs: &Array3<f64>, image: &Array3<f64>, params: &CrfParams, max_side: usize) -> Result<Array3<f64>> {
    let (_, h, w) = probs.dim();
    if h.max(w) <= max_side {
        return refine(probs, image, params);
    }
    check_inputs(probs, image)?;
    let factor = max_side as f64 / h.max(w) as f64;
    let (sh, sw) = (((h as f64 * factor).round() as usize).max(1), ((w as f64 * factor).round() as usize).max(1));
    let small = renormalize(resize_bilinear(probs, sh, sw));
    let small_img = resize_bilinear(image, sh, sw);
    let refined = refine(&small, &small_img, &params.scaled(factor))?;
    Ok(renormalize(resize_bilinear(&refined, h, w)))
}

fn renormalize(mut probs: Array3<f64>) -> Array3<f64> {
    let sums = probs.sum_axis(Axis(0));
    for mut plane in probs.axis_iter_mut(Axis(0)) {
        plane /= &sums;
    }
    probs
}

/// Converts a `K x (H*W)` matrix to `K x H x W`.
pub fn as_planes(probs: Array2<f64>, h: usize, w: usize) -> Result<Array3<f64>> {
    let k = probs.nrows();
    probs
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((k, h, w))
        .map_err(|e| Error::shape(e.to_string()))
}
