use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use divproj::covariance::{sparse_idio_cov, ThresholdRule};
use divproj::inference::lasso::{lasso, tuning_tau, LassoProblem};
use divproj::projection::{fit_diversified, pc_factors};
use divproj::rng::standard_normal_matrix;
use divproj::weights::walsh_hadamard_weights;

fn panel(n: usize, t: usize, r: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = standard_normal_matrix(&mut rng, n, r);
    let f = standard_normal_matrix(&mut rng, t, r);
    b * f.transpose() + standard_normal_matrix(&mut rng, n, t)
}

fn projection(c: &mut Criterion) {
    let mut group = c.benchmark_group("factors");
    for n in [100, 400] {
        let x = panel(n, n, 3, 1);
        let w = walsh_hadamard_weights(n, 5).unwrap();
        group.bench_with_input(BenchmarkId::new("diversified", n), &n, |b, _| {
            b.iter(|| fit_diversified(&x, &w).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("pc", n), &n, |b, _| b.iter(|| pc_factors(&x, 5).unwrap()));
    }
    group.finish();
}

fn lasso_solver(c: &mut Criterion) {
    let (n, t) = (200, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = standard_normal_matrix(&mut rng, t, n);
    let y: Vec<f64> = (0..t).map(|s| d[(s, 0)] - 2.0 * d[(s, 5)] + d[(s, 9)]).collect();
    let tau = tuning_tau(1.0, n, t, 4.1);
    c.bench_function("lasso_200x200", |b| b.iter(|| lasso(&LassoProblem::new(&d, &y, tau)).unwrap()));
}

fn thresholding(c: &mut Criterion) {
    let x = panel(300, 200, 3, 3);
    let w = walsh_hadamard_weights(300, 3).unwrap();
    let u = fit_diversified(&x, &w).unwrap().residuals;
    let rule = ThresholdRule::default();
    c.bench_function("scad_cov_300", |b| b.iter(|| sparse_idio_cov(&u, &rule).unwrap()));
}

criterion_group!(benches, projection, lasso_solver, thresholding);
criterion_main!(benches);
