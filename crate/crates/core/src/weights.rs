//! Diversified weight matrices.
//!
//! A weight matrix `W` is `N x R`: one row per series, one column per
//! working factor. Factors are then estimated as `W'x_t / N`. The
//! constructors here cover the deterministic Hadamard-type designs, sieve
//! transforms of an observed characteristic, trimmed loadings learned on a
//! historical window, and transforms of an initial observation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eig_range;
use crate::projection::pc_factors;

/// Default trimming constant for [`rolling_window_weights`]; caps weights at 1.
pub const DEFAULT_TRIM_EPSILON: f64 = 1.0;

/// Relative eigenvalue cutoff below which `W'W/N` is reported as rank deficient.
const RANK_DEFICIENT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Repeated `(+1 x (k-1), -1 x (k-1))` blocks.
    HadamardPattern,
    /// Upper-left block of a Sylvester Hadamard matrix.
    #[default]
    WalshHadamard,
    /// Sieve basis evaluated at a per-series characteristic.
    Sieve,
    /// Trimmed PCA loadings from a historical window.
    RollingWindow,
    /// Sieve basis evaluated at the initial observation `x_0`.
    InitialTransform,
    Custom,
}

/// Sieve basis family. Only polynomials are implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SieveBasis {
    /// `phi_k(z) = z^k`, `k = 1..R`.
    #[default]
    Polynomial,
}

impl SieveBasis {
    fn eval(self, z: f64, k: usize) -> f64 {
        match self {
            Self::Polynomial => z.powi(k as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightWarning {
    /// Column is identically zero.
    ZeroColumn { column: usize },
    /// `W'W/N` is singular to tolerance (collinear or zero columns).
    RankDeficient { min_eig: f64 },
}

/// An `N x R` matrix of diversified weights.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    values: DMatrix<f64>,
    scheme: WeightScheme,
}

impl WeightMatrix {
    /// Wraps an arbitrary matrix. Entries must be finite and `R >= 1`.
    pub fn new(values: DMatrix<f64>, scheme: WeightScheme) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::InvalidDimension("weight matrix needs N >= 1 rows".into()));
        }
        if values.ncols() == 0 {
            return Err(Error::InvalidDimension("weight matrix needs R >= 1 columns".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        Ok(Self { values, scheme })
    }

    pub fn custom(values: DMatrix<f64>) -> Result<Self> {
        Self::new(values, WeightScheme::Custom)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    /// Number of series `N`.
    pub fn n_series(&self) -> usize {
        self.values.nrows()
    }

    /// Working number of factors `R`.
    pub fn n_working_factors(&self) -> usize {
        self.values.ncols()
    }

    /// First `r` columns, keeping the scheme tag.
    pub fn leading_columns(&self, r: usize) -> Result<Self> {
        if r == 0 || r > self.n_working_factors() {
            return Err(Error::InvalidDimension(format!(
                "cannot take {r} of {} weight columns",
                self.n_working_factors()
            )));
        }
        Ok(Self { values: self.values.columns(0, r).into_owned(), scheme: self.scheme })
    }

    pub fn diagnostics(&self) -> WeightDiagnostics {
        check_diversified(self)
    }
}

/// Summary of how well a weight matrix meets the diversification conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub max_abs_entry: f64,
    /// Smallest eigenvalue of `W'W/N`.
    pub min_eig_gram: f64,
    /// `lambda_max / lambda_min` of `W'W/N`; infinite when singular.
    pub gram_condition: f64,
    pub warnings: Vec<WeightWarning>,
}

impl WeightDiagnostics {
    pub fn is_degenerate(&self) -> bool {
        !self.warnings.is_empty()
    }
}

fn check_dims(n: usize, r: usize) -> Result<()> {
    if n == 0 || r == 0 {
        return Err(Error::InvalidDimension(format!("need N >= 1 and R >= 1, got N={n}, R={r}")));
    }
    if r > n {
        return Err(Error::InvalidDimension(format!("R = {r} exceeds N = {n}")));
    }
    Ok(())
}

/// `w_1 = 1`; column `k >= 2` repeats `(+1 x (k-1), -1 x (k-1))` truncated to `N`.
pub fn hadamard_pattern_weights(n: usize, r: usize) -> Result<WeightMatrix> {
    check_dims(n, r)?;
    let values = DMatrix::from_fn(n, r, |i, k| if k == 0 || (i / k) % 2 == 0 { 1.0 } else { -1.0 });
    WeightMatrix::new(values, WeightScheme::HadamardPattern)
}

/// Upper-left `N x R` block of the `2^K` Sylvester Hadamard matrix,
/// `K = ceil(log2 N)`.
///
/// Entry `(i, j)` of the Sylvester matrix is `(-1)^{popcount(i & j)}`, which
/// is what the doubling recursion `[[H, H], [H, -H]]` produces. Only the
/// requested block is materialized.
pub fn walsh_hadamard_weights(n: usize, r: usize) -> Result<WeightMatrix> {
    check_dims(n, r)?;
    let values = DMatrix::from_fn(n, r, |i, j| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 });
    WeightMatrix::new(values, WeightScheme::WalshHadamard)
}

/// Order `2^K` of the Sylvester matrix used for `N` series.
pub fn sylvester_order(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

fn sieve_matrix(z: &[f64], r: usize, basis: SieveBasis) -> Result<DMatrix<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidDimension("characteristic vector is empty".into()));
    }
    if r == 0 {
        return Err(Error::InvalidDimension("R must be at least 1".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("characteristic vector"));
    }
    Ok(DMatrix::from_fn(z.len(), r, |i, k| basis.eval(z[i], k + 1)))
}

/// Sieve weights `w_{i,k} = phi_k(z_i)` from one characteristic per series.
pub fn sieve_weights(z: &[f64], r: usize, basis: SieveBasis) -> Result<WeightMatrix> {
    WeightMatrix::new(sieve_matrix(z, r, basis)?, WeightScheme::Sieve)
}

/// Polynomial transforms of the initial observation, `w_{i,k} = x_{i,0}^k`.
pub fn initial_transform_weights(x0: &[f64], r: usize) -> Result<WeightMatrix> {
    WeightMatrix::new(sieve_matrix(x0, r, SieveBasis::Polynomial)?, WeightScheme::InitialTransform)
}

/// Trimmed PCA loadings learned on a historical `N x T0` window:
/// `w_{i,k} = b_{i,k} / max(1, epsilon * max_i |b_{i,k}|)`.
pub fn rolling_window_weights(x_hist: &DMatrix<f64>, r: usize, epsilon: f64) -> Result<WeightMatrix> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!("trimming constant must be positive, got {epsilon}")));
    }
    let t0 = x_hist.ncols();
    if t0 < r {
        return Err(Error::InsufficientHistory { needed: r, got: t0 });
    }
    let fit = pc_factors(x_hist, r)?;
    WeightMatrix::new(trim_loadings(fit.loadings, epsilon), WeightScheme::RollingWindow)
}

pub(crate) fn trim_loadings(mut loadings: DMatrix<f64>, epsilon: f64) -> DMatrix<f64> {
    for mut col in loadings.column_iter_mut() {
        let peak = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let denom = (epsilon * peak).max(1.0);
        col /= denom;
    }
    loadings
}

/// Diagnostics for the diversification conditions: bounded entries and
/// `lambda_min(W'W/N)` bounded away from zero. Never fails; problems are
/// reported as warnings.
pub fn check_diversified(w: &WeightMatrix) -> WeightDiagnostics {
    let values = w.values();
    let n = values.nrows() as f64;
    let max_abs_entry = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let gram = values.transpose() * values / n;
    let (min_eig, max_eig) = sym_eig_range(&gram);

    let mut warnings = Vec::new();
    for (k, col) in values.column_iter().enumerate() {
        if col.iter().all(|&v| v == 0.0) {
            warnings.push(WeightWarning::ZeroColumn { column: k });
        }
    }
    if max_eig <= 0.0 || min_eig <= RANK_DEFICIENT_TOL * max_eig {
        warnings.push(WeightWarning::RankDeficient { min_eig });
    }
    for warning in &warnings {
        log::warn!("degenerate diversified weights: {warning:?}");
    }

    let gram_condition = if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY };
    WeightDiagnostics { max_abs_entry, min_eig_gram: min_eig, gram_condition, warnings }
}
