//! Lasso by cyclic coordinate descent.
//!
//! Minimizes `(1/T)|y - D g|^2 + tau * sum_j w_j |g_j|`. The coordinate
//! update is `g_j = S(d_j' r_{-j} / T, tau w_j / 2) / (d_j' d_j / T)` with
//! `S` the soft-threshold, so the KKT conditions read
//! `|(2/T) d_j'(y - D g)| <= tau w_j`, with equality and matching sign on
//! the support.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LASSO_TOL: f64 = 1e-10;
pub const DEFAULT_LASSO_MAX_ITER: usize = 10_000;
/// Coefficients at or below this magnitude count as unselected.
pub const SUPPORT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LassoProblem<'a> {
    /// `T x N`.
    pub design: &'a DMatrix<f64>,
    pub response: &'a [f64],
    pub tau: f64,
    /// Maximum number of full sweeps.
    pub max_iter: usize,
    /// Convergence when the largest coefficient change in a sweep is below this.
    pub tol: f64,
    /// Per-column penalty multipliers; zero leaves a column unpenalized.
    pub penalty_factors: Option<&'a [f64]>,
    /// Penalize on the unit-variance scale of each column. Equivalent to
    /// multiplying column `j`'s penalty by `sqrt(d_j'd_j / T)`.
    pub standardize: bool,
    pub warm_start: Option<&'a [f64]>,
}

impl<'a> LassoProblem<'a> {
    pub fn new(design: &'a DMatrix<f64>, response: &'a [f64], tau: f64) -> Self {
        Self {
            design,
            response,
            tau,
            max_iter: DEFAULT_LASSO_MAX_ITER,
            tol: DEFAULT_LASSO_TOL,
            penalty_factors: None,
            standardize: false,
            warm_start: None,
        }
    }

    /// Effective per-column penalty `tau * w_j` (times the column scale when
    /// standardizing).
    pub fn column_penalties(&self) -> Vec<f64> {
        let t = self.design.nrows() as f64;
        (0..self.design.ncols())
            .map(|j| {
                let w = self.penalty_factors.map_or(1.0, |p| p[j]);
                let scale = if self.standardize { (self.design.column(j).norm_squared() / t).sqrt() } else { 1.0 };
                self.tau * w * scale
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let (t, n) = self.design.shape();
        if self.response.len() != t {
            return Err(Error::DimensionMismatch {
                what: "lasso response length",
                expected: t,
                got: self.response.len(),
            });
        }
        if t == 0 {
            return Err(Error::EmptyPanel("lasso design has no rows".into()));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lasso penalty must be finite and non-negative, got {}",
                self.tau
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("lasso tolerance must be positive".into()));
        }
        if let Some(p) = self.penalty_factors {
            if p.len() != n {
                return Err(Error::DimensionMismatch { what: "penalty factors", expected: n, got: p.len() });
            }
            if p.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(Error::InvalidParameter("penalty factors must be finite and non-negative".into()));
            }
        }
        if let Some(w) = self.warm_start {
            if w.len() != n {
                return Err(Error::DimensionMismatch { what: "warm start", expected: n, got: w.len() });
            }
        }
        if self.design.iter().chain(self.response).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lasso data"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoFit {
    pub coef: Vec<f64>,
    /// Objective after each sweep; the first entry is at the starting point.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

impl LassoFit {
    pub fn support(&self) -> Vec<usize> {
        support(&self.coef)
    }
}

pub fn support(coef: &[f64]) -> Vec<usize> {
    coef.iter().enumerate().filter(|(_, c)| c.abs() > SUPPORT_TOL).map(|(j, _)| j).collect()
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

fn objective(resid: &[f64], coef: &[f64], penalties: &[f64]) -> f64 {
    let t = resid.len() as f64;
    resid.iter().map(|r| r * r).sum::<f64>() / t + coef.iter().zip(penalties).map(|(c, p)| p * c.abs()).sum::<f64>()
}

pub fn lasso(problem: &LassoProblem<'_>) -> Result<LassoFit> {
    problem.validate()?;
    let d = problem.design;
    let (t, n) = d.shape();
    let tf = t as f64;
    let penalties = problem.column_penalties();
    let col_sq: Vec<f64> = (0..n).map(|j| d.column(j).norm_squared() / tf).collect();

    let mut coef = problem.warm_start.map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
    let mut resid: Vec<f64> = problem.response.to_vec();
    for (j, &c) in coef.iter().enumerate() {
        if c != 0.0 {
            for (r, x) in resid.iter_mut().zip(d.column(j).iter()) {
                *r -= c * x;
            }
        }
    }

    let mut trace = vec![objective(&resid, &coef, &penalties)];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < problem.max_iter {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..n {
            if col_sq[j] == 0.0 {
                coef[j] = 0.0;
                continue;
            }
            let col = d.column(j);
            let old = coef[j];
            // d_j' r_{-j} / T
            let rho = col.iter().zip(&resid).map(|(x, r)| x * r).sum::<f64>() / tf + col_sq[j] * old;
            let new = soft_threshold(rho, penalties[j] / 2.0) / col_sq[j];
            if new != old {
                let delta = new - old;
                for (r, x) in resid.iter_mut().zip(col.iter()) {
                    *r -= delta * x;
                }
                coef[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        trace.push(objective(&resid, &coef, &penalties));
        if max_change < problem.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("lasso did not converge in {} sweeps; returning last iterate", problem.max_iter);
    }
    Ok(LassoFit { coef, objective_trace: trace, sweeps, converged })
}

/// `C * sqrt(sigma2 * ln N / T)`.
pub fn tuning_tau(sigma2: f64, n: usize, t: usize, c: f64) -> f64 {
    c * (sigma2 * (n as f64).ln() / t as f64).sqrt()
}

pub const SIGMA2_FLOOR: f64 = 1e-12;
pub const SIGMA_REL_TOL: f64 = 1e-3;
pub const DEFAULT_SIGMA_ROUNDS: usize = 5;

#[derive(Debug, Clone)]
pub struct SigmaIteration {
    /// Penalty used for `fit`.
    pub tau: f64,
    /// Variance estimate that produced `tau`.
    pub sigma2: f64,
    /// Every variance estimate, starting with the response variance.
    pub sigma2_path: Vec<f64>,
    pub fit: LassoFit,
}

/// Feasible tuning: start from `Var(y)`, then alternate a lasso fit with the
/// residual mean square until the relative change drops below `1e-3` or
/// `rounds` fits have run.
///
/// `template` supplies the design, response and solver settings; its `tau`
/// is ignored.
pub fn iterate_sigma(template: &LassoProblem<'_>, c: f64, rounds: usize) -> Result<SigmaIteration> {
    if rounds == 0 {
        return Err(Error::InvalidParameter("at least one tuning round is required".into()));
    }
    let (t, n) = template.design.shape();
    let y = template.response;
    let mean = y.iter().sum::<f64>() / t as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
    let mut sigma2 = var.max(SIGMA2_FLOOR);
    let mut path = vec![sigma2];
    let mut warm: Option<Vec<f64>> = None;
    loop {
        let tau = tuning_tau(sigma2, n, t, c);
        let mut problem = template.clone();
        problem.tau = tau;
        problem.warm_start = warm.as_deref();
        let fit = lasso(&problem)?;
        let resid_ms = {
            let d = template.design;
            let mut ss = 0.0;
            for i in 0..t {
                let fitted: f64 =
                    fit.coef.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, c)| d[(i, j)] * c).sum();
                ss += (y[i] - fitted).powi(2);
            }
            (ss / t as f64).max(SIGMA2_FLOOR)
        };
        let rel = (resid_ms - sigma2).abs() / sigma2;
        path.push(resid_ms);
        if rel < SIGMA_REL_TOL || path.len() > rounds {
            return Ok(SigmaIteration { tau, sigma2, sigma2_path: path, fit });
        }
        sigma2 = resid_ms;
        warm = Some(fit.coef);
    }
}
