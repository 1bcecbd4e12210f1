//! One full desk-scale metrics run per test case, printing the table rows
//! and wall time.

use eigenspline::simbench::{desk_scale_scenario, run_grid, TestFunction};
use std::time::Instant;

fn main() {
    for case in [TestFunction::Case1, TestFunction::Case2, TestFunction::Case3] {
        let scenario = desk_scale_scenario(case, 0.1, 20260810);
        let t0 = Instant::now();
        let out = run_grid(&scenario).unwrap();
        println!(
            "{} ({} replicates, {:.1}s total, cache {:.2}s):",
            scenario.function.name(),
            scenario.replicates,
            t0.elapsed().as_secs_f64(),
            out.cache_seconds.unwrap_or(0.0)
        );
        for row in &out.rows {
            println!(
                "  {:>6}  bias2={:10.3}  var={:10.3}  mse={:10.3}  ({:.3}s/fit)",
                row.label,
                row.bias_sq * 1e4,
                row.variance * 1e4,
                row.mse * 1e4,
                row.mean_seconds
            );
        }
        for f in &out.failures {
            println!("  {} FAILED rep {}: {}", f.label, f.replicate, f.error);
        }
    }
}
