//! Sparse idiosyncratic covariance by generalized thresholding of residual
//! sample covariances.
//!
//! Off-diagonal entries `s_ij` are shrunk with `h(s_ij, tau_ij)` where
//! `tau_ij = C sqrt(s_ii s_jj) omega_NT` and
//! `omega_NT = sqrt(log N / T) + 1 / sqrt(N)`; the diagonal is kept as is.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eig_range;

/// Canonical SCAD shape parameter.
pub const DEFAULT_SCAD_A: f64 = 3.7;
/// Default thresholding constant `C`.
pub const DEFAULT_THRESHOLD_C: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    Hard,
    Soft,
    #[default]
    Scad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub kind: ThresholdKind,
    pub constant: f64,
    pub scad_a: f64,
}

impl Default for ThresholdRule {
    fn default() -> Self {
        Self { kind: ThresholdKind::Scad, constant: DEFAULT_THRESHOLD_C, scad_a: DEFAULT_SCAD_A }
    }
}

impl ThresholdRule {
    pub fn new(kind: ThresholdKind, constant: f64) -> Result<Self> {
        Self { kind, constant, scad_a: DEFAULT_SCAD_A }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.constant >= 0.0) || !self.constant.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "threshold constant must be finite and non-negative, got {}",
                self.constant
            )));
        }
        if !(self.scad_a > 2.0) {
            return Err(Error::InvalidParameter(format!("SCAD a must exceed 2, got {}", self.scad_a)));
        }
        Ok(self)
    }
}

/// Apply the thresholding function `h(s, tau)`.
pub fn threshold_value(s: f64, tau: f64, rule: &ThresholdRule) -> f64 {
    let abs = s.abs();
    match rule.kind {
        ThresholdKind::Hard => {
            if abs >= tau {
                s
            } else {
                0.0
            }
        }
        ThresholdKind::Soft => soft(s, tau),
        ThresholdKind::Scad => {
            let a = rule.scad_a;
            if abs <= 2.0 * tau {
                soft(s, tau)
            } else if abs <= a * tau {
                ((a - 1.0) * s - s.signum() * a * tau) / (a - 2.0)
            } else {
                s
            }
        }
    }
}

fn soft(s: f64, tau: f64) -> f64 {
    s.signum() * (s.abs() - tau).max(0.0)
}

/// `omega_NT = sqrt(log N / T) + 1/sqrt(N)`.
pub fn omega_nt(n: usize, t: usize) -> f64 {
    ((n as f64).ln() / t as f64).sqrt() + 1.0 / (n as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct SparseCovariance {
    /// Thresholded `N x N` estimate.
    pub sigma_u: DMatrix<f64>,
    pub omega: f64,
    /// Number of nonzero entries above the diagonal.
    pub nonzero_offdiag: usize,
    /// The `tau_ij` used (diagonal entries are zero).
    pub threshold_grid: DMatrix<f64>,
    /// `max_i sum_j 1{sigma_ij != 0}`.
    pub m_n_q0: f64,
    /// `max_i sum_j |sigma_ij|`.
    pub m_n_q1: f64,
}

/// Sample covariance `U U' / T` (no demeaning; residuals are mean-free by
/// construction when the panel is).
pub fn residual_covariance(u_hat: &DMatrix<f64>) -> DMatrix<f64> {
    u_hat * u_hat.transpose() / u_hat.ncols() as f64
}

/// Threshold the residual sample covariance of an `N x T` residual matrix.
pub fn sparse_idio_cov(u_hat: &DMatrix<f64>, rule: &ThresholdRule) -> Result<SparseCovariance> {
    let (n, t) = u_hat.shape();
    if t < 2 {
        return Err(Error::TooFewObservations { needed: 2, got: t });
    }
    if n == 0 {
        return Err(Error::EmptyPanel("no residual series".into()));
    }
    let rule = rule.validated()?;
    let s = residual_covariance(u_hat);
    threshold_sample_cov(s, t, &rule)
}

/// Threshold an already-computed `N x N` sample covariance estimated on `t` periods.
pub fn threshold_sample_cov(mut s: DMatrix<f64>, t: usize, rule: &ThresholdRule) -> Result<SparseCovariance> {
    let n = s.nrows();
    if let Some(series) = (0..n).find(|&i| !(s[(i, i)] > 0.0)) {
        return Err(Error::DegenerateResidual { series });
    }
    let omega = omega_nt(n, t);
    let sd: Vec<f64> = (0..n).map(|i| s[(i, i)].sqrt()).collect();
    let mut grid = DMatrix::zeros(n, n);
    let mut nonzero_offdiag = 0;
    for j in 0..n {
        for i in (j + 1)..n {
            let tau = rule.constant * sd[i] * sd[j] * omega;
            let h = threshold_value(s[(i, j)], tau, rule);
            s[(i, j)] = h;
            s[(j, i)] = h;
            grid[(i, j)] = tau;
            grid[(j, i)] = tau;
            if h != 0.0 {
                nonzero_offdiag += 1;
            }
        }
    }
    let (m_n_q0, m_n_q1) = sparsity_measures(&s);
    Ok(SparseCovariance { sigma_u: s, omega, nonzero_offdiag, threshold_grid: grid, m_n_q0, m_n_q1 })
}

fn sparsity_measures(s: &DMatrix<f64>) -> (f64, f64) {
    let mut q0 = 0.0_f64;
    let mut q1 = 0.0_f64;
    for row in s.row_iter() {
        q0 = q0.max(row.iter().filter(|v| **v != 0.0).count() as f64);
        q1 = q1.max(row.iter().map(|v| v.abs()).sum());
    }
    (q0, q1)
}

#[derive(Debug, Clone)]
pub struct InverseCovariance {
    pub inverse: DMatrix<f64>,
    /// Diagonal shift applied before inverting (zero when none was needed).
    pub shift: f64,
}

/// Default eigenvalue floor: `1e-6` times the mean diagonal.
pub fn default_eig_floor(cov: &DMatrix<f64>) -> f64 {
    1e-6 * cov.diagonal().mean()
}

/// Cholesky inverse. When `lambda_min <= eig_floor` the diagonal is first
/// shifted by `eig_floor - lambda_min`.
pub fn invert_sparse_cov(cov: &DMatrix<f64>, eig_floor: Option<f64>) -> Result<InverseCovariance> {
    let n = cov.nrows();
    if n == 0 || cov.ncols() != n {
        return Err(Error::InvalidDimension(format!("covariance must be square and nonempty, got {:?}", cov.shape())));
    }
    let floor = eig_floor.unwrap_or_else(|| default_eig_floor(cov));
    let (min_eig, _) = sym_eig_range(cov);
    let mut shifted = cov.clone();
    let mut shift = 0.0;
    if min_eig <= floor {
        shift = floor - min_eig;
        log::warn!("covariance has lambda_min = {min_eig:e}; shifting diagonal by {shift:e} before inversion");
        for i in 0..n {
            shifted[(i, i)] += shift;
        }
    }
    let chol = shifted.cholesky().ok_or(Error::Singular("covariance not positive definite after eigenvalue floor"))?;
    Ok(InverseCovariance { inverse: chol.inverse(), shift })
}
