//! Prints reference quantities used to freeze test thresholds.

use eigenspline::eigensys::precompute_cache;
use eigenspline::kernels::{DataSet, Kernel};
use eigenspline::simbench::{eval_test_function, TestFunction};
use eigenspline::solvers::{fit_eigen_cached, fit_exact, predict};
use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use std::time::Instant;

fn main() {
    // Truncation convergence: cubic kernel, Case 1, n = 1000, lambda 1e-6.
    let n = 1000;
    let kernel = Kernel::cubic();
    let lambda = 1e-6;
    let x = Array1::from_shape_fn(n, |i| (i + 1) as f64 / n as f64);
    let mut rng = ChaCha20Rng::seed_from_u64(2026);
    let normal = Normal::new(0.0, 0.1).unwrap();
    let y = Array1::from_shape_fn(n, |i| {
        eval_test_function(TestFunction::Case1, x[i]) + normal.sample(&mut rng)
    });
    let data = DataSet::new(x, y).unwrap();
    let t0 = Instant::now();
    let exact = fit_exact(&data, &kernel, lambda).unwrap();
    let exact_fitted = predict(&exact, data.x().as_slice().unwrap()).unwrap();
    println!("exact fit: {:.2}s", t0.elapsed().as_secs_f64());

    for n_points in [100usize, 400, 1000] {
        let t0 = Instant::now();
        let cache = precompute_cache(&kernel, n_points).unwrap();
        let cache_time = t0.elapsed().as_secs_f64();
        println!("N = {n_points} (cache {cache_time:.2}s):");
        for rank in [10, 20, 30, 40, 50] {
            let fit = fit_eigen_cached(&data, &cache, rank, lambda).unwrap();
            let fitted = predict(&fit, data.x().as_slice().unwrap()).unwrap();
            let disc = (&fitted - &exact_fitted).mapv(|v| v * v).sum() / n as f64;
            println!("  K = {rank:2}: ||f_K - f||^2/n = {disc:.6e}");
        }
    }
}
