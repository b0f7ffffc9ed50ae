use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Row-wise softmax over the unmasked columns; masked columns get exactly 0.
/// A row with every column masked is all zeros.
pub fn softmax_rows(scores: &mut Array2<f64>, key_mask: Option<&[bool]>) {
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| keep(*j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if keep(j) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Attention weights `softmax(Q Kᵀ / √d_k)`.
pub(crate) fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, key_mask: Option<&[bool]>) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|v| v * scale);
    softmax_rows(&mut scores, key_mask);
    scores
}

/// Scaled dot-product attention over the keys allowed by `key_mask`.
pub fn attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>, key_mask: Option<&[bool]>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return Err(Error::Shape(format!(
            "attention got Q {:?}, K {:?}, V {:?}",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    if let Some(m) = key_mask {
        if m.len() != k.nrows() {
            return Err(Error::Shape(format!("mask covers {} keys, K has {}", m.len(), k.nrows())));
        }
    }
    for (name, x) in [("Q", &q), ("K", &k), ("V", &v)] {
        if x.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("attention input {name}")));
        }
    }
    Ok(attention_weights(q, k, key_mask).dot(&v))
}
