//! Factor-augmented forecasting and the rolling out-of-sample protocol.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gram_inverse, DEFAULT_RANK_TOL};
use crate::projection::{estimate_factors, pc_factors};
use crate::weights::{trim_loadings, WeightMatrix};

/// OLS fit of `y_{t+h}` on `z_t = (f_t', g_t')'`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentedRegression {
    /// Factor coefficients first, then observables.
    pub delta_hat: Vec<f64>,
    pub lead: usize,
    #[serde(skip)]
    pub design_gram: DMatrix<f64>,
    pub n_factors: usize,
    pub n_observables: usize,
    pub pinv_fallback: bool,
}

fn design_row(f_t: &[f64], g_t: &[f64]) -> DVector<f64> {
    DVector::from_iterator(f_t.len() + g_t.len(), f_t.iter().chain(g_t).copied())
}

/// Regress `y_{t+h}` on `(f_t, g_t)` over `t = 1..T-h`.
///
/// `factors` is `T x R`, `observables` is `T x p`; either may have zero
/// columns. A near-singular design gram is inverted with a pseudo-inverse.
pub fn fit_augmented(
    y: &[f64],
    observables: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    lead: usize,
) -> Result<AugmentedRegression> {
    let t = y.len();
    if factors.nrows() != t {
        return Err(Error::DimensionMismatch {
            what: "factor periods vs response length",
            expected: t,
            got: factors.nrows(),
        });
    }
    if observables.nrows() != t {
        return Err(Error::DimensionMismatch {
            what: "observable periods vs response length",
            expected: t,
            got: observables.nrows(),
        });
    }
    let (r, p) = (factors.ncols(), observables.ncols());
    let k = r + p;
    let needed = k + 1;
    if t < lead || t - lead < needed {
        return Err(Error::TooFewObservations { needed: needed + lead, got: t });
    }
    let rows = t - lead;
    let mut design = DMatrix::zeros(rows, k);
    design.columns_mut(0, r).copy_from(&factors.rows(0, rows));
    design.columns_mut(r, p).copy_from(&observables.rows(0, rows));
    let target = DVector::from_column_slice(&y[lead..]);

    let gram = design.tr_mul(&design);
    let (inv, pinv_fallback) = gram_inverse(&gram, DEFAULT_RANK_TOL);
    if pinv_fallback {
        log::warn!("forecast design gram is near-singular; using pseudo-inverse");
    }
    let delta = inv * design.tr_mul(&target);
    Ok(AugmentedRegression {
        delta_hat: delta.iter().copied().collect(),
        lead,
        design_gram: gram,
        n_factors: r,
        n_observables: p,
        pinv_fallback,
    })
}

/// `delta' (f_T', g_T')'`.
pub fn predict(model: &AugmentedRegression, f_t: &[f64], g_t: &[f64]) -> Result<f64> {
    if f_t.len() != model.n_factors {
        return Err(Error::DimensionMismatch { what: "factor vector", expected: model.n_factors, got: f_t.len() });
    }
    if g_t.len() != model.n_observables {
        return Err(Error::DimensionMismatch {
            what: "observable vector",
            expected: model.n_observables,
            got: g_t.len(),
        });
    }
    let z = design_row(f_t, g_t);
    Ok(model.delta_hat.iter().zip(z.iter()).map(|(a, b)| a * b).sum())
}

/// Produces factor estimates for one estimation window.
///
/// `x` is the full `N x T_total` panel; the window is columns
/// `start..start + len`. Implementations must return a `len x R` matrix and
/// may only use data at or before the window's last column.
pub trait FactorEstimator: Sync {
    fn name(&self) -> String;
    fn estimate(&self, x: &DMatrix<f64>, start: usize, len: usize) -> Result<DMatrix<f64>>;
}

/// Diversified projection with fixed weights.
#[derive(Debug, Clone)]
pub struct FixedWeights {
    pub label: String,
    pub weights: WeightMatrix,
}

impl FactorEstimator for FixedWeights {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn estimate(&self, x: &DMatrix<f64>, start: usize, len: usize) -> Result<DMatrix<f64>> {
        estimate_factors(&x.columns(start, len).into_owned(), &self.weights)
    }
}

/// Principal-components benchmark on each window.
#[derive(Debug, Clone)]
pub struct PrincipalComponents {
    pub r: usize,
}

impl FactorEstimator for PrincipalComponents {
    fn name(&self) -> String {
        format!("pc_r{}", self.r)
    }

    fn estimate(&self, x: &DMatrix<f64>, start: usize, len: usize) -> Result<DMatrix<f64>> {
        Ok(pc_factors(&x.columns(start, len).into_owned(), self.r)?.factors)
    }
}

/// Trimmed-PCA weights re-learned for each window from the `len`
/// observations immediately preceding it. `history` holds the pre-sample
/// periods that precede column 0 of the panel.
#[derive(Debug, Clone)]
pub struct RollingWindowWeights {
    pub history: DMatrix<f64>,
    pub r: usize,
    pub epsilon: f64,
}

impl RollingWindowWeights {
    fn preceding(&self, x: &DMatrix<f64>, start: usize, len: usize) -> Result<DMatrix<f64>> {
        let hist = self.history.ncols();
        if hist + start < len {
            return Err(Error::InsufficientHistory { needed: len, got: hist + start });
        }
        if self.history.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch {
                what: "history series",
                expected: x.nrows(),
                got: self.history.nrows(),
            });
        }
        let first = hist + start - len;
        let mut out = DMatrix::zeros(x.nrows(), len);
        for (j, c) in (first..first + len).enumerate() {
            let col = if c < hist { self.history.column(c) } else { x.column(c - hist) };
            out.set_column(j, &col);
        }
        Ok(out)
    }
}

impl FactorEstimator for RollingWindowWeights {
    fn name(&self) -> String {
        format!("dp_rolling_r{}", self.r)
    }

    fn estimate(&self, x: &DMatrix<f64>, start: usize, len: usize) -> Result<DMatrix<f64>> {
        let past = self.preceding(x, start, len)?;
        let loadings = pc_factors(&past, self.r)?.loadings;
        let w = WeightMatrix::new(trim_loadings(loadings, self.epsilon), crate::weights::WeightScheme::RollingWindow)?;
        estimate_factors(&x.columns(start, len).into_owned(), &w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RollingForecastReport {
    pub method: String,
    pub forecasts: Vec<f64>,
    pub realized: Vec<f64>,
    pub mse: f64,
}

/// Settings shared by every method in one rolling comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingSetup {
    /// Estimation window length `T`.
    pub window: usize,
    /// Number of forecasts `m`.
    pub steps: usize,
    /// Forecast lead `h`.
    pub lead: usize,
}

impl RollingSetup {
    pub fn one_step(window: usize, steps: usize) -> Self {
        Self { window, steps, lead: 1 }
    }
}

fn check_rolling(y: &[f64], x: &DMatrix<f64>, extra: Option<&DMatrix<f64>>, setup: &RollingSetup) -> Result<()> {
    let RollingSetup { window, steps, lead } = *setup;
    if window == 0 || steps == 0 || lead == 0 {
        return Err(Error::InvalidParameter("window, steps and lead must all be positive".into()));
    }
    let needed_y = window + steps + lead - 1;
    if y.len() < needed_y {
        return Err(Error::TooFewObservations { needed: needed_y, got: y.len() });
    }
    let needed_x = window + steps - 1;
    if x.ncols() < needed_x {
        return Err(Error::TooFewObservations { needed: needed_x, got: x.ncols() });
    }
    if let Some(g) = extra {
        if g.nrows() < needed_x {
            return Err(Error::TooFewObservations { needed: needed_x, got: g.nrows() });
        }
    }
    Ok(())
}

/// Observables for one window: intercept, current `y`, then any extra columns.
fn window_observables(y: &[f64], extra: Option<&DMatrix<f64>>, start: usize, len: usize) -> DMatrix<f64> {
    let p_extra = extra.map_or(0, |g| g.ncols());
    DMatrix::from_fn(len, 2 + p_extra, |j, c| match c {
        0 => 1.0,
        1 => y[start + j],
        _ => extra.expect("extra columns exist")[(start + j, c - 2)],
    })
}

/// Rolling out-of-sample forecasts for one estimator.
///
/// For step `s = 0..m-1` the window is periods `s..s+T-1`; factors are
/// re-estimated there, `y_{t+h}` is regressed on `(f_t, 1, y_t, extra_t)`
/// and `y_{s+T-1+h}` is forecast from the window's last period.
pub fn rolling_forecast(
    y: &[f64],
    x: &DMatrix<f64>,
    extra: Option<&DMatrix<f64>>,
    setup: &RollingSetup,
    estimator: &dyn FactorEstimator,
) -> Result<RollingForecastReport> {
    check_rolling(y, x, extra, setup)?;
    let RollingSetup { window, steps, lead } = *setup;
    let mut forecasts = Vec::with_capacity(steps);
    let mut realized = Vec::with_capacity(steps);
    for s in 0..steps {
        let factors = estimator.estimate(x, s, window)?;
        if factors.nrows() != window {
            return Err(Error::DimensionMismatch {
                what: "estimated factor rows",
                expected: window,
                got: factors.nrows(),
            });
        }
        let g = window_observables(y, extra, s, window);
        let model = fit_augmented(&y[s..s + window], &g, &factors, lead)?;
        let last = window - 1;
        let f_last: Vec<f64> = factors.row(last).iter().copied().collect();
        let g_last: Vec<f64> = g.row(last).iter().copied().collect();
        forecasts.push(predict(&model, &f_last, &g_last)?);
        realized.push(y[s + last + lead]);
    }
    let mse = mean_squared_error(&forecasts, &realized);
    Ok(RollingForecastReport { method: estimator.name(), forecasts, realized, mse })
}

pub fn mean_squared_error(forecasts: &[f64], realized: &[f64]) -> f64 {
    forecasts.iter().zip(realized).map(|(f, y)| (f - y).powi(2)).sum::<f64>() / forecasts.len() as f64
}

/// Several estimators run on identical windows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastComparison {
    pub realized: Vec<f64>,
    pub methods: Vec<RollingForecastReport>,
}

impl ForecastComparison {
    /// `MSE(method) / MSE(baseline)`.
    pub fn relative_mse(&self, method: &str, baseline: &str) -> Option<f64> {
        let find = |name: &str| self.methods.iter().find(|m| m.method == name).map(|m| m.mse);
        Some(find(method)? / find(baseline)?)
    }

    /// CSV with columns `step, realized, forecast_<method>...`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "realized".to_string()];
        header.extend(self.methods.iter().map(|m| format!("forecast_{}", m.method)));
        wtr.write_record(&header)?;
        for (s, y) in self.realized.iter().enumerate() {
            let mut row = vec![s.to_string(), crate::io::fmt_f64(*y)];
            row.extend(self.methods.iter().map(|m| crate::io::fmt_f64(m.forecasts[s])));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::io("forecast csv", e))?;
        Ok(())
    }
}

pub fn compare_forecasts(
    y: &[f64],
    x: &DMatrix<f64>,
    extra: Option<&DMatrix<f64>>,
    setup: &RollingSetup,
    estimators: &[&dyn FactorEstimator],
) -> Result<ForecastComparison> {
    let methods = estimators.iter().map(|e| rolling_forecast(y, x, extra, setup, *e)).collect::<Result<Vec<_>>>()?;
    let realized = methods.first().map(|m| m.realized.clone()).unwrap_or_default();
    Ok(ForecastComparison { realized, methods })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal_matrix;
    use crate::weights::walsh_hadamard_weights;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Mutex;

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        standard_normal_matrix(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols)
    }

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn recovers_exact_observable_coefficient() {
        // y_{t+1} = g_t exactly, no factors
        let g: Vec<f64> = (0..12).map(|t| ((t * 7) % 5) as f64 - 1.3).collect();
        let mut y = vec![0.0; 12];
        y[1..12].copy_from_slice(&g[..11]);
        let model = fit_augmented(&y, &col(&g), &DMatrix::zeros(12, 0), 1).unwrap();
        assert_relative_eq!(model.delta_hat[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_series_with_intercept() {
        let y = vec![4.2; 10];
        let ones = DMatrix::from_element(10, 1, 1.0);
        let f = randn(10, 1, 1);
        let model = fit_augmented(&y, &ones, &f, 1).unwrap();
        assert_relative_eq!(model.delta_hat[1], 4.2, epsilon = 1e-10);
        assert!(model.delta_hat[0].abs() < 1e-10);
        assert_relative_eq!(predict(&model, &[0.7], &[1.0]).unwrap(), 4.2, epsilon = 1e-10);
    }

    #[test]
    fn small_instance_matches_normal_equations() {
        // T=6, R=1, p=1, h=1: solve the 2x2 system directly
        let f = [0.5, -1.0, 2.0, 0.3, -0.7, 1.1];
        let g = [1.0, 2.0, 0.0, -1.0, 0.5, 3.0];
        let y = [0.0, 1.2, -0.4, 2.5, 0.9, -1.1];
        let model = fit_augmented(&y, &col(&g), &col(&f), 1).unwrap();
        let (mut s_ff, mut s_fg, mut s_gg, mut s_fy, mut s_gy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for t in 0..5 {
            s_ff += f[t] * f[t];
            s_fg += f[t] * g[t];
            s_gg += g[t] * g[t];
            s_fy += f[t] * y[t + 1];
            s_gy += g[t] * y[t + 1];
        }
        let det = s_ff * s_gg - s_fg * s_fg;
        let a = (s_gg * s_fy - s_fg * s_gy) / det;
        let b = (s_ff * s_gy - s_fg * s_fy) / det;
        assert_relative_eq!(model.delta_hat[0], a, epsilon = 1e-12);
        assert_relative_eq!(model.delta_hat[1], b, epsilon = 1e-12);
    }

    #[test]
    fn too_few_observations() {
        let y = vec![1.0; 3];
        let err = fit_augmented(&y, &DMatrix::from_element(3, 2, 1.0), &DMatrix::zeros(3, 0), 1);
        assert!(matches!(err, Err(Error::TooFewObservations { .. })));
    }

    #[test]
    fn predict_examples() {
        let model = AugmentedRegression {
            delta_hat: vec![0.0, 0.0],
            lead: 1,
            design_gram: DMatrix::identity(2, 2),
            n_factors: 1,
            n_observables: 1,
            pinv_fallback: false,
        };
        assert_eq!(predict(&model, &[5.0], &[2.0]).unwrap(), 0.0);
        let model = AugmentedRegression { delta_hat: vec![1.0, 0.0], ..model };
        assert_eq!(predict(&model, &[3.0], &[9.0]).unwrap(), 3.0);
        assert!(predict(&model, &[3.0, 1.0], &[9.0]).is_err());
    }

    #[test]
    fn in_sample_perfect_fit_predicts_realized() {
        let f = randn(20, 2, 3);
        let y: Vec<f64> = (0..20).map(|t| if t == 0 { 0.0 } else { 2.0 * f[(t - 1, 0)] - f[(t - 1, 1)] }).collect();
        let model = fit_augmented(&y, &DMatrix::zeros(20, 0), &f, 1).unwrap();
        for t in 0..19 {
            let p = predict(&model, &[f[(t, 0)], f[(t, 1)]], &[]).unwrap();
            assert_relative_eq!(p, y[t + 1], epsilon = 1e-10);
        }
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let f = randn(30, 2, 5);
        let g = randn(30, 1, 6);
        let y: Vec<f64> = randn(30, 1, 7).iter().copied().collect();
        let model = fit_augmented(&y, &g, &f, 2).unwrap();
        let delta = DVector::from_vec(model.delta_hat.clone());
        let mut acc = DVector::zeros(3);
        for t in 0..28 {
            let z = DVector::from_vec(vec![f[(t, 0)], f[(t, 1)], g[(t, 0)]]);
            acc += &z * (y[t + 2] - delta.dot(&z));
        }
        assert!(acc.amax() < 1e-10);
    }

    #[test]
    fn duplicated_factor_keeps_fitted_values() {
        let f = randn(25, 1, 8);
        let y: Vec<f64> = randn(25, 1, 9).iter().copied().collect();
        let g = DMatrix::from_element(25, 1, 1.0);
        let single = fit_augmented(&y, &g, &f, 1).unwrap();
        let mut dup = DMatrix::zeros(25, 2);
        dup.set_column(0, &f.column(0));
        dup.set_column(1, &f.column(0));
        let double = fit_augmented(&y, &g, &dup, 1).unwrap();
        assert!(double.pinv_fallback);
        for t in 0..24 {
            let a = predict(&single, &[f[(t, 0)]], &[1.0]).unwrap();
            let b = predict(&double, &[f[(t, 0)], f[(t, 0)]], &[1.0]).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn forecast_invariant_to_factor_rotation() {
        let f = randn(40, 2, 10);
        let y: Vec<f64> = randn(40, 1, 11).iter().copied().collect();
        let g = DMatrix::from_element(40, 1, 1.0);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -1.0, 1.5]);
        let fq = &f * &q;
        let a = fit_augmented(&y, &g, &f, 1).unwrap();
        let b = fit_augmented(&y, &g, &fq, 1).unwrap();
        let pa = predict(&a, &[f[(39, 0)], f[(39, 1)]], &[1.0]).unwrap();
        let pb = predict(&b, &[fq[(39, 0)], fq[(39, 1)]], &[1.0]).unwrap();
        assert_relative_eq!(pa, pb, epsilon = 1e-10);
    }

    #[test]
    fn noiseless_ar1_is_forecast_exactly() {
        let total = 80;
        // unit-modulus coefficient, so the path never settles at its mean
        let mut y = vec![-4.0; total];
        for t in 1..total {
            y[t] = 1.5 - y[t - 1];
        }
        let x = randn(16, total, 12);
        let est = FixedWeights { label: "dp".into(), weights: walsh_hadamard_weights(16, 2).unwrap() };
        let report = rolling_forecast(&y, &x, None, &RollingSetup::one_step(20, 30), &est).unwrap();
        assert!(report.mse < 1e-12, "mse = {}", report.mse);
    }

    #[test]
    fn constant_series_has_zero_mse() {
        let y = vec![2.5; 60];
        let x = randn(10, 60, 13);
        let est = PrincipalComponents { r: 2 };
        let report = rolling_forecast(&y, &x, None, &RollingSetup::one_step(25, 20), &est).unwrap();
        assert!(report.mse < 1e-16, "mse = {}", report.mse);
        assert_eq!(report.mse, mean_squared_error(&report.forecasts, &report.realized));
    }

    #[test]
    fn insufficient_data_rejected() {
        let y = vec![0.0; 20];
        let x = randn(5, 20, 1);
        let est = PrincipalComponents { r: 1 };
        assert!(rolling_forecast(&y, &x, None, &RollingSetup::one_step(15, 10), &est).is_err());
    }

    struct Spy<'a> {
        inner: &'a dyn FactorEstimator,
        seen: Mutex<Vec<(usize, usize, f64)>>,
    }

    impl FactorEstimator for Spy<'_> {
        fn name(&self) -> String {
            self.inner.name()
        }
        fn estimate(&self, x: &DMatrix<f64>, start: usize, len: usize) -> Result<DMatrix<f64>> {
            let checksum = x.columns(start, len).sum();
            self.seen.lock().unwrap().push((start, len, checksum));
            self.inner.estimate(x, start, len)
        }
    }

    #[test]
    fn methods_see_identical_windows() {
        let x = randn(12, 50, 14);
        let y: Vec<f64> = randn(50, 1, 15).iter().copied().collect();
        let dp = FixedWeights { label: "dp".into(), weights: walsh_hadamard_weights(12, 2).unwrap() };
        let pc = PrincipalComponents { r: 2 };
        let spy_dp = Spy { inner: &dp, seen: Mutex::new(Vec::new()) };
        let spy_pc = Spy { inner: &pc, seen: Mutex::new(Vec::new()) };
        let cmp = compare_forecasts(&y, &x, None, &RollingSetup::one_step(20, 10), &[&spy_dp, &spy_pc]).unwrap();
        assert_eq!(*spy_dp.seen.lock().unwrap(), *spy_pc.seen.lock().unwrap());
        assert_eq!(cmp.methods[0].realized, cmp.methods[1].realized);
        assert_eq!(cmp.relative_mse("dp", "dp"), Some(1.0));

        let mut buf = Vec::new();
        cmp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,realized,forecast_dp,forecast_pc_r2\n"));
        assert_eq!(text.lines().count(), 11);
    }

    #[test]
    fn rolling_weights_use_preceding_periods() {
        let n = 10;
        let history = randn(n, 15, 16);
        let x = randn(n, 40, 17);
        let est = RollingWindowWeights { history: history.clone(), r: 2, epsilon: 1.0 };
        let first = est.preceding(&x, 0, 15).unwrap();
        assert_eq!(first, history);
        let later = est.preceding(&x, 5, 15).unwrap();
        assert_eq!(later.columns(0, 10), history.columns(5, 10));
        assert_eq!(later.columns(10, 5), x.columns(0, 5));
        assert!(est.preceding(&x, 0, 20).is_err());
        assert_eq!(est.estimate(&x, 3, 15).unwrap().shape(), (15, 2));
    }
}
