//! Reference run for the cubic grid-feature Gram approximation quality.

use eigenspline::eigensys::precompute_cache;
use eigenspline::kernels::{gram_sigma, Kernel};

fn main() {
    let kernel = Kernel::cubic();
    let n = 500;
    let xs: Vec<f64> = (1..=n).map(|i| i as f64 / n as f64).collect();
    let sigma = gram_sigma(&kernel, &xs).unwrap();
    let den: f64 = sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cache = precompute_cache(&kernel, 100).unwrap();
    for rank in [10usize, 30, 50] {
        let z = cache.features(&xs, rank).unwrap();
        let zzt = z.dot(&z.t());
        let num: f64 = (&zzt - &sigma).iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("K = {rank}: relative Frobenius error = {:.6e}", num / den);
    }
}
