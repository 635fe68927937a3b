//! Column/row normalizations and column softmax, with their vector-Jacobian products.

use ndarray::{Array1, Array2, Axis};

use crate::{Error, Result};

/// L2-normalizes each column. Returns the normalized matrix and the original norms.
pub(crate) fn normalize_columns(a: &Array2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = a.map_axis(Axis(0), |col| col.dot(&col).sqrt());
    if let Some(j) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm(format!("column {j} of {what}")));
    }
    let mut out = a.clone();
    for (mut col, &n) in out.axis_iter_mut(Axis(1)).zip(norms.iter()) {
        col /= n;
    }
    Ok((out, norms))
}

pub(crate) fn normalize_rows(a: &Array2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let (t, norms) = normalize_columns(&a.t().to_owned(), what).map_err(|e| match e {
        Error::ZeroNorm(msg) => Error::ZeroNorm(msg.replacen("column", "row", 1)),
        other => other,
    })?;
    Ok((t.reversed_axes(), norms))
}

/// Backward of `y = x / |x|` per column: `dx = (dy - y (y . dy)) / |x|`.
pub(crate) fn normalize_columns_backward(
    normed: &Array2<f64>,
    norms: &Array1<f64>,
    grad: &Array2<f64>,
) -> Array2<f64> {
    let mut out = grad.clone();
    for ((mut g, y), &n) in out
        .axis_iter_mut(Axis(1))
        .zip(normed.axis_iter(Axis(1)))
        .zip(norms.iter())
    {
        let proj = y.dot(&g);
        g.scaled_add(-proj, &y);
        g /= n;
    }
    out
}

pub(crate) fn normalize_rows_backward(
    normed: &Array2<f64>,
    norms: &Array1<f64>,
    grad: &Array2<f64>,
) -> Array2<f64> {
    normalize_columns_backward(&normed.t().to_owned(), norms, &grad.t().to_owned()).reversed_axes()
}

/// Softmax over each column, max-subtracted.
pub(crate) fn softmax_columns(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    out
}

/// Backward of column softmax: `dz = p * (dp - sum(p * dp))`.
pub(crate) fn softmax_columns_backward(probs: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    for (mut g, p) in out.axis_iter_mut(Axis(1)).zip(probs.axis_iter(Axis(1))) {
        let inner = p.dot(&g);
        g.zip_mut_with(&p, |gv, &pv| *gv = pv * (*gv - inner));
    }
    out
}

/// Per-column argmax; ties resolve to the lowest row index.
pub(crate) fn argmax_columns(a: &Array2<f64>) -> Vec<usize> {
    a.axis_iter(Axis(1))
        .map(|col| {
            let mut best = 0;
            for (k, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
