//! Factor-augmented double selection for a scalar treatment effect.
//!
//! The controls are split into estimated factors and idiosyncratic parts,
//! both the outcome and the treatment are purged of the factors, the lasso
//! selects among the idiosyncratic parts in each equation, the union of
//! selections is refit by least squares and `beta` comes from the residual
//! regression. With no weights (`R = 0`) this is plain double selection on
//! the raw controls.

pub mod lasso;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{gram_inverse, DEFAULT_RANK_TOL};
use crate::projection::fit_diversified;
use crate::weights::WeightMatrix;

pub use lasso::{
    iterate_sigma, lasso, support, tuning_tau, LassoFit, LassoProblem, SigmaIteration, DEFAULT_SIGMA_ROUNDS,
    SUPPORT_TOL,
};

pub const DEFAULT_PENALTY_C: f64 = 4.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleSelectionOptions {
    /// Constant in `tau = C sqrt(sigma^2 ln N / T)`.
    pub c: f64,
    /// Refit the selected controls without penalty.
    pub refit: bool,
    /// Estimate the factor coefficient and the sparse part in one penalized
    /// fit, leaving the factor columns unpenalized.
    pub joint_step2: bool,
    pub standardize: bool,
    /// Bartlett lags for a HAC variance; `None` uses the plug-in estimate.
    pub hac_lags: Option<usize>,
    pub sigma_rounds: usize,
    pub lasso_max_iter: usize,
    pub lasso_tol: f64,
}

impl Default for DoubleSelectionOptions {
    fn default() -> Self {
        Self {
            c: DEFAULT_PENALTY_C,
            refit: true,
            joint_step2: false,
            standardize: false,
            hac_lags: None,
            sigma_rounds: DEFAULT_SIGMA_ROUNDS,
            lasso_max_iter: lasso::DEFAULT_LASSO_MAX_ITER,
            lasso_tol: lasso::DEFAULT_LASSO_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoubleSelectionResult {
    pub beta_hat: f64,
    pub se: f64,
    /// Union of both lasso supports, ascending.
    pub selected: Vec<usize>,
    pub alpha_y: Vec<f64>,
    pub alpha_g: Vec<f64>,
    /// Length `N`, zero off `selected`.
    pub gamma_hat: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub sigma_g2: f64,
    pub sigma_eta_g2: f64,
    pub eps_y_hat: Vec<f64>,
    pub eps_g_hat: Vec<f64>,
    pub tau_y: f64,
    pub tau_g: f64,
    pub n_factors: usize,
    pub refit: bool,
}

impl DoubleSelectionResult {
    pub fn z_stat(&self, beta: f64) -> f64 {
        (self.beta_hat - beta) / self.se
    }
}

/// Penalized fit of one factor-purged equation.
struct SparseStep {
    alpha: Vec<f64>,
    coef: Vec<f64>,
    tau: f64,
}

fn regress(design: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    if design.ncols() == 0 {
        return DVector::zeros(0);
    }
    let (inv, fallback) = gram_inverse(&design.tr_mul(design), DEFAULT_RANK_TOL);
    if fallback {
        log::warn!("least-squares gram is near-singular; using pseudo-inverse");
    }
    inv * design.tr_mul(y)
}

fn sparse_step(
    response: &DVector<f64>,
    factors: &DMatrix<f64>,
    u_t: &DMatrix<f64>,
    opts: &DoubleSelectionOptions,
) -> Result<SparseStep> {
    let r = factors.ncols();
    let n = u_t.ncols();
    let t = response.len();
    if opts.joint_step2 && r > 0 {
        let mut design = DMatrix::zeros(t, r + n);
        design.columns_mut(0, r).copy_from(factors);
        design.columns_mut(r, n).copy_from(u_t);
        let mut weights = vec![1.0; r + n];
        weights[..r].iter_mut().for_each(|w| *w = 0.0);
        let y = response.as_slice();
        let mut p = LassoProblem::new(&design, y, 0.0);
        p.penalty_factors = Some(&weights);
        p.standardize = opts.standardize;
        p.max_iter = opts.lasso_max_iter;
        p.tol = opts.lasso_tol;
        let it = iterate_sigma(&p, opts.c, opts.sigma_rounds)?;
        let coef = it.fit.coef;
        return Ok(SparseStep { alpha: coef[..r].to_vec(), coef: coef[r..].to_vec(), tau: it.tau });
    }
    let alpha = regress(factors, response);
    let purged = response - factors * &alpha;
    let mut p = LassoProblem::new(u_t, purged.as_slice(), 0.0);
    p.standardize = opts.standardize;
    p.max_iter = opts.lasso_max_iter;
    p.tol = opts.lasso_tol;
    let it = iterate_sigma(&p, opts.c, opts.sigma_rounds)?;
    Ok(SparseStep { alpha: alpha.iter().copied().collect(), coef: it.fit.coef, tau: it.tau })
}

/// Least squares of `response - F alpha` on the selected columns of `U'`.
fn refit_on(
    response: &DVector<f64>,
    factors: &DMatrix<f64>,
    alpha: &[f64],
    u_t: &DMatrix<f64>,
    selected: &[usize],
) -> Vec<f64> {
    let purged = response - factors * DVector::from_column_slice(alpha);
    let sub = u_t.select_columns(selected);
    let coef = regress(&sub, &purged);
    let mut full = vec![0.0; u_t.ncols()];
    for (k, &j) in selected.iter().enumerate() {
        full[j] = coef[k];
    }
    full
}

fn residual(
    response: &DVector<f64>,
    factors: &DMatrix<f64>,
    alpha: &[f64],
    u_t: &DMatrix<f64>,
    coef: &[f64],
) -> DVector<f64> {
    response - factors * DVector::from_column_slice(alpha) - u_t * DVector::from_column_slice(coef)
}

/// Newey-West long-run variance of `v_t` with Bartlett weights.
fn long_run_variance(v: &[f64], lags: usize) -> f64 {
    let t = v.len();
    let gamma = |l: usize| v[l..].iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / t as f64;
    let mut s = gamma(0);
    for l in 1..=lags.min(t.saturating_sub(1)) {
        s += 2.0 * (1.0 - l as f64 / (lags + 1) as f64) * gamma(l);
    }
    s.max(0.0)
}

/// Estimate `beta` in `y_t = beta g_t + nu' x_t + eta_t`, `g_t = theta' x_t + e_t`.
///
/// `x` is the `N x T` control panel. `weights = None` skips the factor step
/// (`U = X`).
pub fn double_selection(
    y: &[f64],
    g: &[f64],
    x: &DMatrix<f64>,
    weights: Option<&WeightMatrix>,
    opts: &DoubleSelectionOptions,
) -> Result<DoubleSelectionResult> {
    let (n, t) = x.shape();
    if y.len() != t {
        return Err(Error::DimensionMismatch { what: "outcome length", expected: t, got: y.len() });
    }
    if g.len() != t {
        return Err(Error::DimensionMismatch { what: "treatment length", expected: t, got: g.len() });
    }
    if !(opts.c > 0.0) {
        return Err(Error::InvalidParameter(format!("penalty constant must be positive, got {}", opts.c)));
    }
    let r = weights.map_or(0, WeightMatrix::n_working_factors);
    if t <= r + 2 {
        return Err(Error::TooFewObservations { needed: r + 3, got: t });
    }

    let (factors, u_t) = match weights {
        Some(w) => {
            let fit = fit_diversified(x, w)?;
            (fit.factors, fit.residuals.transpose())
        }
        None => (DMatrix::zeros(t, 0), x.transpose()),
    };
    let y_vec = DVector::from_column_slice(y);
    let g_vec = DVector::from_column_slice(g);

    let step_y = sparse_step(&y_vec, &factors, &u_t, opts)?;
    let step_g = sparse_step(&g_vec, &factors, &u_t, opts)?;

    let mut selected = support(&step_y.coef);
    selected.extend(support(&step_g.coef));
    selected.sort_unstable();
    selected.dedup();

    let (gamma_hat, theta_hat) = if opts.refit {
        if selected.len() + r + 1 >= t {
            return Err(Error::RefitInfeasible { selected: selected.len(), factors: r, t });
        }
        (
            refit_on(&y_vec, &factors, &step_y.alpha, &u_t, &selected),
            refit_on(&g_vec, &factors, &step_g.alpha, &u_t, &selected),
        )
    } else {
        (step_y.coef.clone(), step_g.coef.clone())
    };

    let eps_y = residual(&y_vec, &factors, &step_y.alpha, &u_t, &gamma_hat);
    let eps_g = residual(&g_vec, &factors, &step_g.alpha, &u_t, &theta_hat);
    let tf = t as f64;
    let ss_g = eps_g.norm_squared();
    if ss_g <= 0.0 {
        return Err(Error::Singular("treatment residuals are identically zero"));
    }
    let beta_hat = eps_g.dot(&eps_y) / ss_g;
    let sigma_g2 = ss_g / tf;
    let prod: Vec<f64> = eps_y.iter().zip(eps_g.iter()).map(|(ey, eg)| (ey - beta_hat * eg) * eg).collect();
    let sigma_eta_g2 = match opts.hac_lags {
        Some(lags) => long_run_variance(&prod, lags),
        None => prod.iter().map(|v| v * v).sum::<f64>() / tf,
    };
    let se = sigma_eta_g2.sqrt() / (tf.sqrt() * sigma_g2);
    debug_assert!(n == gamma_hat.len());

    Ok(DoubleSelectionResult {
        beta_hat,
        se,
        selected,
        alpha_y: step_y.alpha,
        alpha_g: step_g.alpha,
        gamma_hat,
        theta_hat,
        sigma_g2,
        sigma_eta_g2,
        eps_y_hat: eps_y.iter().copied().collect(),
        eps_g_hat: eps_g.iter().copied().collect(),
        tau_y: step_y.tau,
        tau_g: step_g.tau,
        n_factors: r,
        refit: opts.refit,
    })
}

/// `beta_hat -/+ z_{(1+level)/2} se`.
pub fn confidence_interval(result: &DoubleSelectionResult, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let q = Normal::standard().inverse_cdf((1.0 + level) / 2.0);
    Ok((result.beta_hat - q * result.se, result.beta_hat + q * result.se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal_matrix;
    use crate::weights::walsh_hadamard_weights;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        standard_normal_matrix(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols)
    }

    /// Sparse design with two factors; returns `(y, g, x)`.
    fn factor_design(n: usize, t: usize, seed: u64) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
        let b = randn(n, 2, seed);
        let f = randn(t, 2, seed + 1);
        let x = &b * f.transpose() + randn(n, t, seed + 2);
        let e = randn(t, 2, seed + 3);
        let coef = [1.0, -1.5, 0.5];
        let mut g = vec![0.0; t];
        let mut y = vec![0.0; t];
        for s in 0..t {
            let lin: f64 = coef.iter().enumerate().map(|(j, c)| c * x[(j, s)]).sum();
            g[s] = lin + e[(s, 0)];
            y[s] = g[s] + lin + e[(s, 1)];
        }
        (y, g, x)
    }

    #[test]
    fn deterministic_regression_recovers_beta() {
        let (n, t) = (10, 60);
        let x = randn(n, t, 1);
        let g: Vec<f64> = randn(t, 1, 2).iter().copied().collect();
        let y = g.clone();
        let res = double_selection(&y, &g, &x, None, &DoubleSelectionOptions::default()).unwrap();
        assert_relative_eq!(res.beta_hat, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn r_zero_equals_plain_double_selection() {
        let (y, g, x) = factor_design(30, 80, 10);
        let opts = DoubleSelectionOptions::default();
        let res = double_selection(&y, &g, &x, None, &opts).unwrap();
        // manual: lasso on X' directly, union, refit, residual regression
        let d = x.transpose();
        let ly = iterate_sigma(&LassoProblem::new(&d, &y, 0.0), opts.c, opts.sigma_rounds).unwrap();
        let lg = iterate_sigma(&LassoProblem::new(&d, &g, 0.0), opts.c, opts.sigma_rounds).unwrap();
        let mut sel = support(&ly.fit.coef);
        sel.extend(support(&lg.fit.coef));
        sel.sort_unstable();
        sel.dedup();
        assert_eq!(res.selected, sel);
        let sub = d.select_columns(&sel);
        let proj = |v: &[f64]| {
            let v = DVector::from_column_slice(v);
            let c = (sub.tr_mul(&sub)).cholesky().unwrap().solve(&sub.tr_mul(&v));
            &v - &sub * c
        };
        let (ey, eg) = (proj(&y), proj(&g));
        assert_relative_eq!(res.beta_hat, eg.dot(&ey) / eg.norm_squared(), epsilon = 1e-9);
        assert!(res.alpha_y.is_empty());
    }

    #[test]
    fn refit_residuals_orthogonal() {
        let (y, g, x) = factor_design(32, 100, 20);
        let w = walsh_hadamard_weights(32, 3).unwrap();
        let res = double_selection(&y, &g, &x, Some(&w), &DoubleSelectionOptions::default()).unwrap();
        let fit = fit_diversified(&x, &w).unwrap();
        let eg = DVector::from_vec(res.eps_g_hat.clone());
        let scale = eg.norm();
        for k in 0..3 {
            assert!(fit.factors.column(k).dot(&eg).abs() < 1e-8 * scale * fit.factors.column(k).norm());
        }
        for &j in &res.selected {
            let u = fit.residuals.row(j).transpose();
            assert!(u.dot(&eg).abs() < 1e-8 * scale * u.norm());
        }
        for j in 0..32 {
            if !res.selected.contains(&j) {
                assert_eq!(res.gamma_hat[j], 0.0);
                assert_eq!(res.theta_hat[j], 0.0);
            }
        }
        assert!(res.se > 0.0);
    }

    #[test]
    fn no_refit_still_returns_beta() {
        let (y, g, x) = factor_design(32, 100, 30);
        let w = walsh_hadamard_weights(32, 2).unwrap();
        let opts = DoubleSelectionOptions { refit: false, ..Default::default() };
        let res = double_selection(&y, &g, &x, Some(&w), &opts).unwrap();
        assert!(res.beta_hat.is_finite());
        assert!(!res.refit);
    }

    #[test]
    fn scale_equivariance() {
        let (y, g, x) = factor_design(32, 120, 40);
        let w = walsh_hadamard_weights(32, 2).unwrap();
        let opts = DoubleSelectionOptions::default();
        let a = double_selection(&y, &g, &x, Some(&w), &opts).unwrap();
        let c = 3.0;
        let yc: Vec<f64> = y.iter().map(|v| v * c).collect();
        let b = double_selection(&yc, &g, &x, Some(&w), &opts).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_relative_eq!(b.beta_hat, c * a.beta_hat, epsilon = 1e-7);
        assert_relative_eq!(b.z_stat(c), a.z_stat(1.0), epsilon = 1e-6);
    }

    #[test]
    fn joint_step_matches_two_stage_factor_coefficients() {
        // factors are orthogonal to the residual columns, so the unpenalized
        // factor coefficient in the joint fit is the plain regression one
        let (y, g, x) = factor_design(32, 100, 50);
        let w = walsh_hadamard_weights(32, 2).unwrap();
        let joint =
            double_selection(&y, &g, &x, Some(&w), &DoubleSelectionOptions { joint_step2: true, ..Default::default() })
                .unwrap();
        let two = double_selection(&y, &g, &x, Some(&w), &DoubleSelectionOptions::default()).unwrap();
        for (a, b) in joint.alpha_y.iter().zip(&two.alpha_y) {
            assert_relative_eq!(a, b, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn refit_infeasible_reported() {
        let (n, t) = (40, 12);
        let x = randn(n, t, 60);
        let y: Vec<f64> = randn(t, 1, 61).iter().copied().collect();
        let g: Vec<f64> = randn(t, 1, 62).iter().copied().collect();
        let opts = DoubleSelectionOptions { c: 0.05, ..Default::default() };
        let err = double_selection(&y, &g, &x, None, &opts).unwrap_err();
        assert!(matches!(err, Error::RefitInfeasible { .. }));
        assert!(err.to_string().contains("increase the penalty"));
    }

    #[test]
    fn hac_with_zero_lags_is_plug_in() {
        let (y, g, x) = factor_design(32, 100, 70);
        let w = walsh_hadamard_weights(32, 2).unwrap();
        let a = double_selection(&y, &g, &x, Some(&w), &DoubleSelectionOptions::default()).unwrap();
        let b =
            double_selection(&y, &g, &x, Some(&w), &DoubleSelectionOptions { hac_lags: Some(0), ..Default::default() })
                .unwrap();
        assert_relative_eq!(a.se, b.se, epsilon = 1e-14);
    }

    fn result_with(beta_hat: f64, se: f64) -> DoubleSelectionResult {
        DoubleSelectionResult {
            beta_hat,
            se,
            selected: vec![],
            alpha_y: vec![],
            alpha_g: vec![],
            gamma_hat: vec![],
            theta_hat: vec![],
            sigma_g2: 1.0,
            sigma_eta_g2: 1.0,
            eps_y_hat: vec![],
            eps_g_hat: vec![],
            tau_y: 0.0,
            tau_g: 0.0,
            n_factors: 0,
            refit: true,
        }
    }

    #[test]
    fn interval_examples() {
        let r = result_with(1.0, 0.1);
        let (lo, hi) = confidence_interval(&r, 0.95).unwrap();
        assert!((lo - 0.804).abs() < 5e-4 && (hi - 1.196).abs() < 5e-4);
        assert_relative_eq!(hi - 1.0, 0.1 * 1.959963984540054, epsilon = 1e-9);
        let (lo99, hi99) = confidence_interval(&r, 0.99).unwrap();
        assert!(lo99 < lo && hi99 > hi);
        let (a, b) = confidence_interval(&r, 1e-12).unwrap();
        assert!((b - a) < 1e-9);
        assert!(confidence_interval(&r, 1.0).is_err());
    }

    #[test]
    fn result_serializes() {
        let json = serde_json::to_string(&result_with(0.5, 0.2)).unwrap();
        for key in ["beta_hat", "se", "selected", "alpha_y", "gamma_hat", "sigma_eta_g2", "eps_g_hat"] {
            assert!(json.contains(key));
        }
    }
}
