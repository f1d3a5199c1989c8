//! Factor-adjusted mean tests with Benjamini-Hochberg control.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram_inverse, DEFAULT_RANK_TOL};
use crate::projection::estimate_factors;
use crate::spectest::two_sided_p;
use crate::weights::WeightMatrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FarmTestResult {
    pub alpha_hat: Vec<f64>,
    pub z_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Rejected series indices, ascending.
    pub rejected: Vec<usize>,
    pub q_level: f64,
}

#[derive(Debug, Clone)]
pub struct FarmStats {
    pub alpha_hat: Vec<f64>,
    pub z_stats: Vec<f64>,
    /// Per-series residual variance, `T - R - 1` degrees of freedom.
    pub residual_var: Vec<f64>,
}

/// Multiple-testing procedure applied to the p-values.
pub trait RejectionRule {
    fn reject(&self, p_values: &[f64], q: f64) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BenjaminiHochberg;

impl RejectionRule for BenjaminiHochberg {
    fn reject(&self, p_values: &[f64], q: f64) -> Result<Vec<usize>> {
        bh_reject(p_values, q)
    }
}

/// Intercepts and their t-statistics after regressing each series on the
/// diversified factors (with intercept).
///
/// The intercept is linear in the data, `alpha_i = T^{-1} sum_t g_t x_it`
/// with `g_t = 1 - fbar' S_f^{-1} (f_t - fbar)`, so its standard error is
/// `sqrt(sigma_ii sum_t g_t^2) / T`.
pub fn farm_stats(x: &DMatrix<f64>, w: Option<&WeightMatrix>) -> Result<FarmStats> {
    let (n, t) = x.shape();
    let factors = match w {
        Some(w) => estimate_factors(x, w)?,
        None => DMatrix::zeros(t, 0),
    };
    let r = factors.ncols();
    if t < r + 2 {
        return Err(Error::TooFewObservations { needed: r + 2, got: t });
    }
    let tf = t as f64;
    let f_bar = factors.row_mean();
    let mut centred = factors.clone();
    for mut row in centred.row_iter_mut() {
        row -= &f_bar;
    }
    let s_f = centred.tr_mul(&centred) / tf;
    let (s_inv, singular) = gram_inverse(&s_f, DEFAULT_RANK_TOL);
    if singular && r > 0 {
        log::warn!("demeaned factor gram is singular; using pseudo-inverse");
    }
    // g_t = 1 - fbar' S^{-1} (f_t - fbar)
    let lever = &s_inv * f_bar.transpose();
    let g: DVector<f64> = DVector::from_fn(t, |i, _| 1.0 - centred.row(i).dot(&lever.transpose()));
    let g_sq: f64 = g.iter().map(|v| v * v).sum();

    let x_bar = x.column_mean();
    // slopes b_i = S^{-1} cov(f, x_i)
    let slopes = if r > 0 { (x * &centred / tf) * &s_inv } else { DMatrix::zeros(n, 0) };
    let dof = (t - r - 1) as f64;

    let mut alpha_hat = Vec::with_capacity(n);
    let mut z_stats = Vec::with_capacity(n);
    let mut residual_var = Vec::with_capacity(n);
    for i in 0..n {
        let b_i = slopes.row(i);
        let alpha = x_bar[i] - if r > 0 { b_i.dot(&f_bar) } else { 0.0 };
        let mut ss = 0.0;
        for s in 0..t {
            let fitted = alpha + if r > 0 { b_i.dot(&factors.row(s)) } else { 0.0 };
            ss += (x[(i, s)] - fitted).powi(2);
        }
        let var = ss / dof;
        let se = (var * g_sq).sqrt() / tf;
        alpha_hat.push(alpha);
        z_stats.push(if se > 0.0 { alpha / se } else { 0.0 });
        residual_var.push(var);
    }
    Ok(FarmStats { alpha_hat, z_stats, residual_var })
}

/// Benjamini-Hochberg step-up: reject the `k` smallest p-values for the
/// largest `k` with `p_(k) <= q k / N`.
pub fn bh_reject(p_values: &[f64], q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!("FDR level must lie in (0, 1), got {q}")));
    }
    let n = p_values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let cutoff = order
        .iter()
        .enumerate()
        .rev()
        .find(|(rank, &idx)| p_values[idx] <= q * (rank + 1) as f64 / n as f64)
        .map(|(rank, _)| rank + 1)
        .unwrap_or(0);
    let mut rejected: Vec<usize> = order[..cutoff].to_vec();
    rejected.sort_unstable();
    Ok(rejected)
}

/// `farm_stats`, two-sided normal p-values and a rejection rule.
pub fn farm_test_with(
    x: &DMatrix<f64>,
    w: Option<&WeightMatrix>,
    q: f64,
    rule: &dyn RejectionRule,
) -> Result<FarmTestResult> {
    let stats = farm_stats(x, w)?;
    let p_values: Vec<f64> = stats.z_stats.iter().map(|&z| two_sided_p(z)).collect();
    let rejected = rule.reject(&p_values, q)?;
    Ok(FarmTestResult { alpha_hat: stats.alpha_hat, z_stats: stats.z_stats, p_values, rejected, q_level: q })
}

pub fn farm_test(x: &DMatrix<f64>, w: Option<&WeightMatrix>, q: f64) -> Result<FarmTestResult> {
    farm_test_with(x, w, q, &BenjaminiHochberg)
}
