//! Diversified-projection factor estimation.
//!
//! Panels are stored `N x T` (rows are series, columns are periods). Given
//! weights `W` (`N x R`) the factor estimate is `F = X'W / N`, loadings come
//! from least squares of each series on `F`, and residuals are what is left.
//! Two identities hold for every fit regardless of the data: `W'U = 0`
//! (because `W'B = N I`) and `U F = 0` (least-squares orthogonality).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    gram_inverse, operator_norm, projection_matrix, singular_values_desc, sym_eigen_desc, sym_operator_norm,
    DEFAULT_RANK_TOL,
};
use crate::weights::WeightMatrix;

pub use crate::linalg::pseudo_inverse;

/// Largest `T` accepted by the explicit `T x T` projection diagnostics.
pub const MAX_DIAGNOSTIC_T: usize = 2000;

/// An observed `N x T` panel with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    x: DMatrix<f64>,
    pub series_ids: Option<Vec<String>>,
    pub time_ids: Option<Vec<String>>,
}

impl PanelData {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::EmptyPanel(format!("panel is {}x{}", x.nrows(), x.ncols())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("panel"));
        }
        Ok(Self { x, series_ids: None, time_ids: None })
    }

    pub fn with_labels(
        x: DMatrix<f64>,
        series_ids: Option<Vec<String>>,
        time_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut panel = Self::new(x)?;
        if let Some(ids) = &series_ids {
            if ids.len() != panel.n_series() {
                return Err(Error::DimensionMismatch {
                    what: "series labels",
                    expected: panel.n_series(),
                    got: ids.len(),
                });
            }
        }
        if let Some(ids) = &time_ids {
            if ids.len() != panel.n_periods() {
                return Err(Error::DimensionMismatch {
                    what: "time labels",
                    expected: panel.n_periods(),
                    got: ids.len(),
                });
            }
        }
        panel.series_ids = series_ids;
        panel.time_ids = time_ids;
        Ok(panel)
    }

    /// The `N x T` data matrix.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.x
    }

    pub fn n_series(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.x.ncols()
    }
}

/// Result of a factor fit.
#[derive(Debug, Clone)]
pub struct FactorFit {
    /// `T x R`, row `t` is the factor estimate at period `t`.
    pub factors: DMatrix<f64>,
    /// `N x R`.
    pub loadings: DMatrix<f64>,
    /// `N x T`.
    pub residuals: DMatrix<f64>,
    /// `F'F / T`.
    pub gram: DMatrix<f64>,
    /// Weights used; `None` for the PC benchmark.
    pub weights: Option<WeightMatrix>,
    /// Set when the loading regression fell back to a pseudo-inverse.
    pub pinv_fallback: bool,
}

impl FactorFit {
    pub fn n_working_factors(&self) -> usize {
        self.factors.ncols()
    }

    pub fn common_component(&self) -> DMatrix<f64> {
        common_component(&self.loadings, &self.factors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadingsOptions {
    /// Fall back to a pseudo-inverse when `F'F` is singular; error otherwise.
    pub allow_pinv: bool,
    pub rank_tol: f64,
}

impl Default for LoadingsOptions {
    fn default() -> Self {
        Self { allow_pinv: true, rank_tol: DEFAULT_RANK_TOL }
    }
}

/// `F = X'W / N`; row `t` is `(W'x_t / N)'`.
pub fn estimate_factors(x: &DMatrix<f64>, w: &WeightMatrix) -> Result<DMatrix<f64>> {
    if w.n_series() != x.nrows() {
        return Err(Error::DimensionMismatch {
            what: "weight rows vs panel series",
            expected: x.nrows(),
            got: w.n_series(),
        });
    }
    Ok(x.tr_mul(w.values()) / x.nrows() as f64)
}

/// Least-squares loadings `B = X F (F'F)^{-1}`.
pub fn estimate_loadings(x: &DMatrix<f64>, factors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    estimate_loadings_with(x, factors, &LoadingsOptions::default()).map(|(b, _)| b)
}

/// As [`estimate_loadings`]; also reports whether the pseudo-inverse path was taken.
pub fn estimate_loadings_with(
    x: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    opts: &LoadingsOptions,
) -> Result<(DMatrix<f64>, bool)> {
    if factors.nrows() != x.ncols() {
        return Err(Error::DimensionMismatch {
            what: "factor rows vs panel periods",
            expected: x.ncols(),
            got: factors.nrows(),
        });
    }
    if factors.ncols() == 0 {
        return Ok((DMatrix::zeros(x.nrows(), 0), false));
    }
    let gram = factors.tr_mul(factors);
    let (inv, fallback) = gram_inverse(&gram, opts.rank_tol);
    if fallback {
        if !opts.allow_pinv {
            return Err(Error::Singular("factor gram matrix F'F"));
        }
        log::warn!("factor gram matrix is singular to tolerance; using pseudo-inverse for loadings");
    }
    Ok((x * factors * inv, fallback))
}

/// `U = X - B F'`.
pub fn residuals(x: &DMatrix<f64>, loadings: &DMatrix<f64>, factors: &DMatrix<f64>) -> DMatrix<f64> {
    x - common_component(loadings, factors)
}

/// `B F'`.
pub fn common_component(loadings: &DMatrix<f64>, factors: &DMatrix<f64>) -> DMatrix<f64> {
    if loadings.ncols() == 0 {
        return DMatrix::zeros(loadings.nrows(), factors.nrows());
    }
    loadings * factors.transpose()
}

fn assemble(x: &DMatrix<f64>, factors: DMatrix<f64>, weights: Option<WeightMatrix>) -> Result<FactorFit> {
    let (loadings, pinv_fallback) = estimate_loadings_with(x, &factors, &LoadingsOptions::default())?;
    let residuals = residuals(x, &loadings, &factors);
    let gram = factors.tr_mul(&factors) / x.ncols() as f64;
    Ok(FactorFit { factors, loadings, residuals, gram, weights, pinv_fallback })
}

/// Full diversified-projection fit: factors, loadings, residuals and gram.
pub fn fit_diversified(x: &DMatrix<f64>, w: &WeightMatrix) -> Result<FactorFit> {
    let factors = estimate_factors(x, w)?;
    assemble(x, factors, Some(w.clone()))
}

/// Principal-components benchmark with `F'F / T = I_R`.
///
/// Eigenvectors are taken from the `T x T` matrix `X'X` when `T <= N`,
/// otherwise from the `N x N` matrix `XX'` and mapped across via
/// `f_k = X'v_k / sqrt(lambda_k)`. Each factor column is signed so that its
/// sum is non-negative.
pub fn pc_factors(x: &DMatrix<f64>, r: usize) -> Result<FactorFit> {
    let (n, t) = x.shape();
    if r == 0 || r > n.min(t) {
        return Err(Error::InvalidDimension(format!(
            "PC estimator needs 1 <= R <= min(N, T) = {}, got R = {r}",
            n.min(t)
        )));
    }
    let root_t = (t as f64).sqrt();
    let mut factors = if t <= n {
        let (_, vecs) = sym_eigen_desc(&x.tr_mul(x));
        vecs.columns(0, r) * root_t
    } else {
        let (vals, vecs) = sym_eigen_desc(&(x * x.transpose()));
        let mut f = DMatrix::zeros(t, r);
        for k in 0..r {
            let lambda = vals[k];
            if lambda > 0.0 {
                let col = x.tr_mul(&vecs.column(k)) * (root_t / lambda.sqrt());
                f.set_column(k, &col);
            }
        }
        f
    };
    for mut col in factors.column_iter_mut() {
        if col.sum() < 0.0 {
            col.neg_mut();
        }
    }
    assemble(x, factors, None)
}

/// `H = W'B / N` and its singular-value summary. Only computable when the
/// true loadings are known (simulation).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformDiagnostics {
    #[serde(skip)]
    pub h: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Smallest nonzero singular value; zero when `H = 0`.
    pub nu_min: f64,
    pub nu_max: f64,
    pub rank: usize,
    /// `rank(H) < r`: the weights diversify away part of the factor space.
    pub rank_deficient: bool,
}

pub fn transform_matrix(w: &WeightMatrix, b_true: &DMatrix<f64>) -> Result<TransformDiagnostics> {
    transform_matrix_with_tol(w, b_true, DEFAULT_RANK_TOL)
}

pub fn transform_matrix_with_tol(
    w: &WeightMatrix,
    b_true: &DMatrix<f64>,
    rank_tol: f64,
) -> Result<TransformDiagnostics> {
    if b_true.nrows() != w.n_series() {
        return Err(Error::DimensionMismatch {
            what: "loading rows vs weight rows",
            expected: w.n_series(),
            got: b_true.nrows(),
        });
    }
    let h = w.values().tr_mul(b_true) / w.n_series() as f64;
    let singular_values = singular_values_desc(&h);
    let nu_max = singular_values.first().copied().unwrap_or(0.0);
    // Absolute floor so an exactly orthogonal W reports rank 0.
    let cutoff = (rank_tol * nu_max).max(1e-14);
    let nonzero: Vec<f64> = singular_values.iter().copied().filter(|&s| s > cutoff).collect();
    let rank = nonzero.len();
    let nu_min = nonzero.last().copied().unwrap_or(0.0);
    let rank_deficient = rank < b_true.ncols();
    if rank_deficient {
        log::warn!("transformation matrix H has rank {rank} < r = {}", b_true.ncols());
    }
    Ok(TransformDiagnostics { h, singular_values, nu_min, nu_max, rank, rank_deficient })
}

/// Distances between the estimated and true factor spaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceDistance {
    /// `||P_Fhat P_F - P_F||`: zero when `span(F)` lies inside `span(Fhat)`.
    pub proj_overlap: f64,
    /// `||P_{Fhat M} - P_F||` with `M = (HH')^+ H`.
    pub adjusted_distance: f64,
}

/// Both operator-norm space distances. Diagnostic only, `T <= 2000`.
pub fn space_distance(f_hat: &DMatrix<f64>, f_true: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<SpaceDistance> {
    let t = f_hat.nrows();
    if f_true.nrows() != t {
        return Err(Error::DimensionMismatch { what: "factor periods", expected: t, got: f_true.nrows() });
    }
    if t > MAX_DIAGNOSTIC_T {
        return Err(Error::InvalidDimension(format!("space distance is limited to T <= {MAX_DIAGNOSTIC_T}, got {t}")));
    }
    if h.nrows() != f_hat.ncols() || h.ncols() != f_true.ncols() {
        return Err(Error::InvalidDimension(format!(
            "H must be {}x{}, got {}x{}",
            f_hat.ncols(),
            f_true.ncols(),
            h.nrows(),
            h.ncols()
        )));
    }
    let p_hat = projection_matrix(f_hat);
    let p_true = projection_matrix(f_true);
    let proj_overlap = operator_norm(&(&p_hat * &p_true - &p_true));

    let m = pseudo_inverse(&(h * h.transpose()), DEFAULT_RANK_TOL) * h;
    let p_adj = projection_matrix(&(f_hat * m));
    let adjusted_distance = sym_operator_norm(&(p_adj - p_true));
    Ok(SpaceDistance { proj_overlap, adjusted_distance })
}
