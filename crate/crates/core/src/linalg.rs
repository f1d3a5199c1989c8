//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Default relative cutoff for treating singular values as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// The input is symmetrized as `(A + A') / 2` first so rounding asymmetry in
/// products like `X'X` cannot leak into the decomposition.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_range(a: &DMatrix<f64>) -> (f64, f64) {
    if a.nrows() == 0 {
        return (0.0, 0.0);
    }
    let sym = (a + a.transpose()) * 0.5;
    let values = sym.symmetric_eigenvalues();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Singular values in descending order.
pub fn singular_values_desc(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// SVD-based Moore-Penrose inverse. Singular values below
/// `rank_tol * sigma_max` are treated as zero.
pub fn pseudo_inverse(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = rank_tol * sigma_max;
    let mut out = DMatrix::zeros(n, m);
    if sigma_max == 0.0 {
        return out;
    }
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            // out += v_k u_k' / s
            let v_k = v_t.row(k).transpose();
            let u_k = u.column(k);
            out.ger(1.0 / s, &v_k, &u_k, 1.0);
        }
    }
    out
}

/// Numerical rank at a relative singular-value tolerance.
pub fn rank(a: &DMatrix<f64>, rank_tol: f64) -> usize {
    let sv = singular_values_desc(a);
    match sv.first() {
        Some(&max) if max > 0.0 => sv.iter().filter(|&&s| s > rank_tol * max).count(),
        _ => 0,
    }
}

/// Projection onto the column space of `a`: `A (A'A)^+ A'`.
pub fn projection_matrix(a: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = a.transpose() * a;
    let ginv = pseudo_inverse(&gram, DEFAULT_RANK_TOL);
    a * ginv * a.transpose()
}

/// Spectral norm (largest singular value).
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    singular_values_desc(a).first().copied().unwrap_or(0.0)
}

/// Spectral norm of a symmetric matrix via its eigenvalues.
pub fn sym_operator_norm(a: &DMatrix<f64>) -> f64 {
    let (min, max) = sym_eig_range(a);
    min.abs().max(max.abs())
}

/// Symmetric square root `S` with `S S = A`; negative eigenvalues are
/// clipped to zero.
pub fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen_desc(a);
    let roots = values.map(|v| v.max(0.0).sqrt());
    &vectors * DMatrix::from_diagonal(&roots) * vectors.transpose()
}

/// Inverse of a symmetric PSD gram matrix. Falls back to the
/// pseudo-inverse when the eigenvalue ratio falls below `rank_tol`;
/// the returned flag reports whether the fallback was used.
pub fn gram_inverse(gram: &DMatrix<f64>, rank_tol: f64) -> (DMatrix<f64>, bool) {
    let n = gram.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), false);
    }
    let (min, max) = sym_eig_range(gram);
    if max > 0.0 && min > rank_tol * max {
        if let Some(chol) = gram.clone().cholesky() {
            return (chol.inverse(), false);
        }
    }
    (pseudo_inverse(gram, rank_tol), true)
}

/// `max_{ij} |a_ij|`, zero for an empty matrix.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
