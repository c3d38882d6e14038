//! Evaluation metrics: L1 error and its 95% quantile, predictive variance
//! adequacy, and mixing-matrix correlation up to latent relabeling.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub err_l1: f64,
    pub q95_l1: f64,
    pub pva: f64,
    pub h_corr: f64,
    pub n_iter: usize,
    pub t_train: f64,
}

/// Nearest-rank quantile: the `ceil(level * N)`-th smallest value.
pub fn nearest_rank_quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return invalid("quantile of an empty set");
    }
    if values.iter().any(|v| v.is_nan()) {
        return invalid("quantile of a set containing NaN");
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((level * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Mean absolute error and its nearest-rank 95% quantile over all entries.
pub fn l1_metrics<T: Scalar>(pred: &DMatrix<T>, truth: &DMatrix<T>) -> Result<(f64, f64)> {
    check_dims("l1_metrics", truth.shape(), pred.shape())?;
    if pred.is_empty() {
        return invalid("l1_metrics: empty prediction set");
    }
    let errs: Vec<f64> = pred
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (*a - *b).magnitude().to_f64_lossy())
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok((mean, nearest_rank_quantile(&errs, 0.95)?))
}

/// `log mean((y - ŷ)² / v̂)`.
pub fn pva<T: Scalar>(pred_mean: &DMatrix<T>, pred_var: &DMatrix<T>, truth: &DMatrix<T>) -> Result<f64> {
    check_dims("pva mean", truth.shape(), pred_mean.shape())?;
    check_dims("pva variance", truth.shape(), pred_var.shape())?;
    if truth.is_empty() {
        return invalid("pva: empty prediction set");
    }
    let mut total = 0.0;
    for ((m, v), y) in pred_mean.iter().zip(pred_var.iter()).zip(truth.iter()) {
        let v = v.to_f64_lossy();
        if !(v > 0.0) {
            return invalid(format!("pva: nonpositive predictive variance {v}"));
        }
        let e = (*y - *m).to_f64_lossy();
        total += e * e / v;
    }
    Ok((total / truth.len() as f64).ln())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn permutations(q: usize) -> Vec<Vec<usize>> {
    if q == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(q - 1) {
        for pos in 0..=rest.len() {
            let mut perm = rest.clone();
            perm.insert(pos, q - 1);
            out.push(perm);
        }
    }
    out
}

/// Largest Pearson correlation between `vec(H_true)` and `vec(H_est)`
/// over all permutations and sign flips of the columns of `H_est`.
pub fn h_corr<T: Scalar>(h_est: &DMatrix<T>, h_true: &DMatrix<T>) -> Result<f64> {
    check_dims("h_corr", h_true.shape(), h_est.shape())?;
    let (p, q) = h_true.shape();
    if q == 0 || p == 0 {
        return invalid("h_corr: empty matrices");
    }
    if q > 6 {
        return invalid(format!("h_corr: exhaustive matching supports q <= 6, got {q}"));
    }
    let truth: Vec<f64> = h_true.iter().map(|v| v.to_f64_lossy()).collect();
    let est: Vec<f64> = h_est.iter().map(|v| v.to_f64_lossy()).collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    if var(&truth) == 0.0 || var(&est) == 0.0 {
        return invalid("h_corr: zero-variance matrix");
    }
    let mut best = f64::NEG_INFINITY;
    let mut aligned = vec![0.0; p * q];
    for perm in permutations(q) {
        for signs in 0..(1u32 << q) {
            for (c, &src) in perm.iter().enumerate() {
                let s = if signs >> c & 1 == 1 { -1.0 } else { 1.0 };
                for a in 0..p {
                    aligned[c * p + a] = s * est[src * p + a];
                }
            }
            best = best.max(pearson(&truth, &aligned));
        }
    }
    Ok(best)
}
