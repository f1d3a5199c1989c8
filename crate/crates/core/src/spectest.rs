//! Test whether observed factors `G` span the latent factor space.
//!
//! The statistic is `||P_G - P_Fhat||_F^2`. It is centred by the plug-in
//! bias `tr(A W' Sigma_u W) / N^2` with `A = 2 (F'F/T)^{-1}` and scaled by a
//! parametric-bootstrap standard deviation, giving
//! `z = N sqrt(T) (stat - mean) / sigma`, which is standard normal under the
//! null.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::covariance::{sparse_idio_cov, ThresholdRule};
use crate::error::{Error, Result};
use crate::linalg::{gram_inverse, max_abs, pseudo_inverse, sym_eigen_desc, DEFAULT_RANK_TOL};
use crate::projection::fit_diversified;
use crate::rng::{standard_normal_vec, substream, Stream};
use crate::weights::WeightMatrix;

pub const DEFAULT_BOOTSTRAP_DRAWS: usize = 2000;
pub const MIN_BOOTSTRAP_DRAWS: usize = 1000;
/// Floor on the bootstrap standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-12;
/// Relative tolerance on negative eigenvalues of `V` before it is declared non-PSD.
const PSD_CLIP_TOL: f64 = 1e-8;
/// Bootstrap draws per substream; fixed so results are thread-count independent.
const DRAWS_PER_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecTestOptions {
    pub n_draws: usize,
    pub seed: u64,
    /// Two-sided significance level.
    pub level: f64,
}

impl Default for SpecTestOptions {
    fn default() -> Self {
        Self { n_draws: DEFAULT_BOOTSTRAP_DRAWS, seed: 0, level: 0.05 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecTestResult {
    pub statistic: f64,
    pub mean_hat: f64,
    pub sigma_hat: f64,
    pub z: f64,
    pub p_value: f64,
    pub reject: bool,
    pub level: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// The bootstrap variance collapsed to the floor (noiseless input);
    /// the test is then reported as a non-rejection with `p = 1`.
    pub degenerate: bool,
}

/// `||P_G - P_F||_F^2`, computed through `R x R` traces:
/// `tr P_G + tr P_F - 2 tr(P_G P_F)`.
pub fn spec_statistic(f_hat: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<f64> {
    if f_hat.ncols() != g.ncols() {
        return Err(Error::DimensionMismatch {
            what: "observed factor columns vs working factors",
            expected: f_hat.ncols(),
            got: g.ncols(),
        });
    }
    if f_hat.nrows() != g.nrows() {
        return Err(Error::DimensionMismatch { what: "factor periods", expected: f_hat.nrows(), got: g.nrows() });
    }
    let gg_inv = pseudo_inverse(&g.tr_mul(g), DEFAULT_RANK_TOL);
    let ff_inv = pseudo_inverse(&f_hat.tr_mul(f_hat), DEFAULT_RANK_TOL);
    let gf = g.tr_mul(f_hat);
    let tr_pg = (&gg_inv * g.tr_mul(g)).trace();
    let tr_pf = (&ff_inv * f_hat.tr_mul(f_hat)).trace();
    let cross = (&gg_inv * &gf * &ff_inv * gf.transpose()).trace();
    Ok((tr_pg + tr_pf - 2.0 * cross).max(0.0))
}

/// `A = 2 (F'F / T)^{-1}`.
pub fn a_hat(f_hat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = f_hat.nrows() as f64;
    let gram = f_hat.tr_mul(f_hat) / t;
    let (inv, singular) = gram_inverse(&gram, DEFAULT_RANK_TOL);
    if singular {
        return Err(Error::Singular("factor gram F'F/T"));
    }
    Ok(inv * 2.0)
}

/// Plug-in bias `tr(A W' Sigma_u W) / N^2`.
pub fn mean_hat(f_hat: &DMatrix<f64>, w: &WeightMatrix, sigma_u: &DMatrix<f64>) -> Result<f64> {
    let n = w.n_series();
    if sigma_u.nrows() != n || sigma_u.ncols() != n {
        return Err(Error::DimensionMismatch { what: "covariance dimension", expected: n, got: sigma_u.nrows() });
    }
    let a = a_hat(f_hat)?;
    let wsw = w.values().tr_mul(&(sigma_u * w.values()));
    Ok((a * wsw).trace() / (n * n) as f64)
}

/// `V = W' Sigma_u W / N`.
pub fn v_hat(w: &WeightMatrix, sigma_u: &DMatrix<f64>) -> DMatrix<f64> {
    w.values().tr_mul(&(sigma_u * w.values())) / w.n_series() as f64
}

/// Standard deviation of `tr(A Z Z')` with `Z ~ N(0, V)`, by simulation.
pub fn sigma_bootstrap(a: &DMatrix<f64>, v: &DMatrix<f64>, n_draws: usize, seed: u64) -> Result<f64> {
    let r = a.nrows();
    if a.ncols() != r || v.shape() != (r, r) {
        return Err(Error::InvalidDimension(format!(
            "A and V must both be {r}x{r}, got {:?} and {:?}",
            a.shape(),
            v.shape()
        )));
    }
    if n_draws < MIN_BOOTSTRAP_DRAWS {
        return Err(Error::InvalidParameter(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_DRAWS} draws, got {n_draws}"
        )));
    }
    let (vals, vecs) = sym_eigen_desc(v);
    let max_eig = vals.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let min_eig = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -PSD_CLIP_TOL * max_eig.max(1.0) {
        return Err(Error::NotPsd { min_eig });
    }
    if min_eig < 0.0 {
        log::warn!("clipping negative eigenvalue {min_eig:e} of bootstrap covariance V");
    }
    let root = &vecs * DMatrix::from_diagonal(&vals.map(|x| x.max(0.0).sqrt()));
    // tr(A Z Z') = xi' (L' A L) xi with Z = L xi.
    let kernel = root.tr_mul(&(a * &root));

    let n_chunks = n_draws.div_ceil(DRAWS_PER_CHUNK);
    let draws: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let len = DRAWS_PER_CHUNK.min(n_draws - chunk * DRAWS_PER_CHUNK);
            let mut rng = substream(seed, chunk as u64, Stream::Bootstrap as u16);
            let kernel = &kernel;
            (0..len)
                .map(move |_| {
                    let xi = DVector::from_vec(standard_normal_vec(&mut rng, r));
                    xi.dot(&(kernel * &xi))
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mean = draws.iter().sum::<f64>() / n_draws as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n_draws - 1) as f64;
    Ok(var.sqrt())
}

/// Full pipeline with `R = dim(g_t)`: factors, residuals, thresholded
/// covariance, bias, bootstrap scale and a two-sided normal p-value.
///
/// `x` is `N x T`, `g` is `T x R` and `w` must have `R` columns.
pub fn spec_test(
    x: &DMatrix<f64>,
    g: &DMatrix<f64>,
    w: &WeightMatrix,
    rule: &ThresholdRule,
    opts: &SpecTestOptions,
) -> Result<SpecTestResult> {
    let (n, t) = x.shape();
    if g.nrows() != t {
        return Err(Error::DimensionMismatch { what: "observed factor periods", expected: t, got: g.nrows() });
    }
    if w.n_working_factors() != g.ncols() {
        return Err(Error::DimensionMismatch {
            what: "weight columns vs dim(g_t)",
            expected: g.ncols(),
            got: w.n_working_factors(),
        });
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must lie in (0, 1), got {}", opts.level)));
    }
    let fit = fit_diversified(x, w)?;
    let statistic = spec_statistic(&fit.factors, g)?;

    // Noiseless panels leave exactly-zero residual variances; the bias and
    // the bootstrap scale are both zero there.
    let noiseless = max_abs(&fit.residuals) <= 1e-12 * max_abs(x).max(f64::MIN_POSITIVE);
    let sigma_u = if noiseless { DMatrix::zeros(n, n) } else { sparse_idio_cov(&fit.residuals, rule)?.sigma_u };
    let mean = mean_hat(&fit.factors, w, &sigma_u)?;
    let a = a_hat(&fit.factors)?;
    let v = v_hat(w, &sigma_u);
    let boot = sigma_bootstrap(&a, &v, opts.n_draws, opts.seed)?;
    let degenerate = boot <= SIGMA_FLOOR;
    let sigma_hat = boot.max(SIGMA_FLOOR);
    let z = n as f64 * (t as f64).sqrt() * (statistic - mean) / sigma_hat;
    let p_value = if degenerate { 1.0 } else { two_sided_p(z) };
    Ok(SpecTestResult {
        statistic,
        mean_hat: mean,
        sigma_hat,
        z,
        p_value,
        reject: p_value < opts.level,
        level: opts.level,
        n_bootstrap: opts.n_draws,
        seed: opts.seed,
        degenerate,
    })
}

pub(crate) fn two_sided_p(z: f64) -> f64 {
    let normal = Normal::standard();
    (2.0 * normal.cdf(-z.abs())).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::projection_matrix;
    use crate::weights::walsh_hadamard_weights;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::rng::standard_normal_matrix(&mut rng, rows, cols)
    }

    /// Element-wise `sum_ij (P_G - P_F)_ij^2` from explicit projection matrices.
    fn frobenius_oracle(f: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
        let d = projection_matrix(g) - projection_matrix(f);
        let mut acc = 0.0;
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                acc += d[(i, j)] * d[(i, j)];
            }
        }
        acc
    }

    #[test]
    fn statistic_examples() {
        let f = randn(5, 2, 1);
        assert!(spec_statistic(&f, &f).unwrap() < 1e-12);

        let a = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0, -1.0]);
        assert_relative_eq!(spec_statistic(&a, &b).unwrap(), 2.0, epsilon = 1e-12);

        let g = randn(5, 2, 2);
        assert_relative_eq!(spec_statistic(&f, &g).unwrap(), frobenius_oracle(&f, &g), epsilon = 1e-10);
    }

    #[test]
    fn statistic_rejects_column_mismatch() {
        assert!(spec_statistic(&randn(5, 2, 1), &randn(5, 1, 2)).is_err());
    }

    #[test]
    fn mean_hat_examples() {
        let n = 8;
        let w = WeightMatrix::custom(DMatrix::from_element(n, 1, 1.0)).unwrap();
        // F'F/T = 1
        let f = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(mean_hat(&f, &w, &DMatrix::zeros(n, n)).unwrap(), 0.0);
        assert_relative_eq!(mean_hat(&f, &w, &DMatrix::identity(n, n)).unwrap(), 2.0 / n as f64, epsilon = 1e-14);
    }

    #[test]
    fn mean_hat_against_triple_loop() {
        let (n, t, r) = (6, 10, 2);
        let f = randn(t, r, 5);
        let w = WeightMatrix::custom(randn(n, r, 6)).unwrap();
        let s0 = randn(n, n, 7);
        let sigma = &s0 * s0.transpose();
        let gram = f.tr_mul(&f) / t as f64;
        let a = gram.try_inverse().unwrap() * 2.0;
        let wv = w.values();
        let mut acc = 0.0;
        for k in 0..r {
            for l in 0..r {
                let mut m = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        m += wv[(i, l)] * sigma[(i, j)] * wv[(j, k)];
                    }
                }
                acc += a[(k, l)] * m;
            }
        }
        let expected = acc / (n * n) as f64;
        assert_relative_eq!(mean_hat(&f, &w, &sigma).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn mean_hat_singular_gram_errors() {
        let f = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let w = walsh_hadamard_weights(4, 2).unwrap();
        assert!(matches!(mean_hat(&f, &w, &DMatrix::identity(4, 4)), Err(Error::Singular(_))));
    }

    #[test]
    fn bootstrap_zero_variance() {
        let a = DMatrix::from_element(1, 1, 2.0);
        assert_eq!(sigma_bootstrap(&a, &DMatrix::zeros(1, 1), 1000, 1).unwrap(), 0.0);
    }

    #[test]
    fn bootstrap_chi_square_variance() {
        // tr(A Z Z') = 2 chi^2_1 has variance 8.
        let a = DMatrix::from_element(1, 1, 2.0);
        let v = DMatrix::from_element(1, 1, 1.0);
        let s = sigma_bootstrap(&a, &v, 200_000, 11).unwrap();
        assert!((s - 8f64.sqrt()).abs() / 8f64.sqrt() < 0.03, "sigma = {s}");
    }

    #[test]
    fn bootstrap_is_deterministic_across_pools() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let s1 = one.install(|| sigma_bootstrap(&a, &v, 5000, 3).unwrap());
        let s4 = four.install(|| sigma_bootstrap(&a, &v, 5000, 3).unwrap());
        assert_eq!(s1.to_bits(), s4.to_bits());
    }

    #[test]
    fn bootstrap_converges_when_doubling() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let s1 = sigma_bootstrap(&a, &v, 20_000, 9).unwrap();
        let s2 = sigma_bootstrap(&a, &v, 40_000, 9).unwrap();
        assert!((s1 - s2).abs() / s2 < 0.05);
    }

    #[test]
    fn bootstrap_argument_checks() {
        let a = DMatrix::identity(2, 2);
        assert!(sigma_bootstrap(&a, &DMatrix::identity(2, 2), 10, 0).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(sigma_bootstrap(&a, &bad, 1000, 0), Err(Error::NotPsd { .. })));
        // rounding-level negativity is clipped
        let nearly = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-14]);
        assert!(sigma_bootstrap(&a, &nearly, 1000, 0).is_ok());
    }

    #[test]
    fn noiseless_panel_does_not_reject() {
        let (n, t) = (32, 20);
        let b = randn(n, 2, 1);
        let f = randn(t, 2, 2);
        let x = &b * f.transpose();
        let w = walsh_hadamard_weights(n, 2).unwrap();
        let res = spec_test(&x, &f, &w, &ThresholdRule::default(), &SpecTestOptions::default()).unwrap();
        assert!(res.statistic < 1e-10);
        assert!(res.degenerate);
        assert!(!res.reject);
        assert_eq!(res.p_value, 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn statistic_basis_free_and_bounded(seed in 0u64..10_000) {
                let f = randn(12, 3, seed);
                let g = randn(12, 3, seed + 7);
                let q1 = randn(3, 3, seed + 11) + DMatrix::identity(3, 3) * 3.0;
                let q2 = randn(3, 3, seed + 13) + DMatrix::identity(3, 3) * 3.0;
                let base = spec_statistic(&f, &g).unwrap();
                let mixed = spec_statistic(&(&f * q1), &(&g * q2)).unwrap();
                prop_assert!((base - mixed).abs() < 1e-8);
                prop_assert!(base <= 6.0 + 1e-10);
            }
        }
    }
}
