use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use divproj::fdr::farm_test;
use divproj::io::{read_panel, write_panel};
use divproj::linalg::projection_matrix;
use divproj::projection::{estimate_factors, fit_diversified, PanelData};
use divproj::rng::standard_normal_matrix;
use divproj::weights::{sieve_weights, walsh_hadamard_weights, SieveBasis, WeightMatrix};

fn factor_panel(n: usize, t: usize, r: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = standard_normal_matrix(&mut rng, n, r).add_scalar(1.0);
    let f = standard_normal_matrix(&mut rng, t, r);
    (&b * f.transpose() + standard_normal_matrix(&mut rng, n, t), f)
}

#[test]
fn panel_csv_round_trip_is_exact() {
    let (x, _) = factor_panel(7, 5, 2, 3);
    let ids = |p: &str, k: usize| (0..k).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let panel = PanelData::with_labels(x, Some(ids("s", 7)), Some(ids("t", 5))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    write_panel(&panel, &path).unwrap();
    assert_eq!(read_panel(&path).unwrap(), panel);
}

#[test]
fn diversified_factors_track_the_true_space() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, t) = (400, 120);
    let z: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = DMatrix::from_fn(n, 2, |i, k| 2.0 * z[i].powi(k as i32 + 1) + 0.3 * rng.random::<f64>());
    let f = standard_normal_matrix(&mut rng, t, 2);
    let x = &b * f.transpose() + standard_normal_matrix(&mut rng, n, t);
    let w = sieve_weights(&z, 4, SieveBasis::Polynomial).unwrap();
    let fit = fit_diversified(&x, &w).unwrap();
    // The true factor columns should lie almost entirely inside span(F_hat).
    let p_hat = projection_matrix(&fit.factors);
    let leak = (&f - &p_hat * &f).norm() / f.norm();
    assert!(leak < 0.15, "leak {leak}");
}

#[test]
fn farm_test_finds_sparse_shifted_means() {
    // Shifts leak into the factor means through W'mu/N, biasing null z by
    // roughly b_i k delta sqrt(T) / N; this design keeps that below 0.1.
    let (mut x, _) = factor_panel(800, 100, 1, 5);
    for i in 0..4 {
        for s in 0..100 {
            x[(i, s)] += 1.5;
        }
    }
    let w = walsh_hadamard_weights(800, 2).unwrap();
    let res = farm_test(&x, Some(&w), 0.05).unwrap();
    let hits = res.rejected.iter().filter(|&&i| i < 4).count();
    let false_hits = res.rejected.len() - hits;
    assert_eq!(hits, 4, "only {hits} of 4 shifted series rejected");
    assert!(false_hits <= 2, "{false_hits} false rejections");
}

proptest! {
    #[test]
    fn factors_ignore_series_order(seed in 0u64..500, shift in 1usize..12) {
        let (x, _) = factor_panel(12, 9, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let w = standard_normal_matrix(&mut rng, 12, 3);
        let perm: Vec<usize> = (0..12).map(|i| (i + shift) % 12).collect();
        let xp = DMatrix::from_fn(12, 9, |i, s| x[(perm[i], s)]);
        let wp = DMatrix::from_fn(12, 3, |i, k| w[(perm[i], k)]);
        let a = estimate_factors(&x, &WeightMatrix::custom(w).unwrap()).unwrap();
        let b = estimate_factors(&xp, &WeightMatrix::custom(wp).unwrap()).unwrap();
        prop_assert!((a - b).abs().max() < 1e-12);
    }
}
