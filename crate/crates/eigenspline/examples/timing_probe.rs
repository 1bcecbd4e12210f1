//! Reference timing runs for the scaling checks.

use eigenspline::kernels::Kernel;
use eigenspline::simbench::{timing_sweep, MethodSpec, TestFunction, TimingSweep};

fn main() {
    let eigen = TimingSweep {
        function: TestFunction::Case3,
        kernel: Kernel::cubic(),
        sigma: 0.1,
        seed: 11,
        method: MethodSpec::Eigen { k: 30 },
        n_list: vec![2000, 20000, 80000],
        repeats: 5,
        n_points: 100,
        lambda: 1e-6,
    };
    let rows = timing_sweep(&eigen).unwrap();
    for r in &rows {
        println!("EIGEN K=30 n={:>6}: {:.4}s", r.n, r.seconds);
    }
    let ratio = rows[2].seconds / rows[1].seconds;
    println!("ratio t(80000)/t(20000) = {ratio:.2}");

    let all = TimingSweep {
        function: TestFunction::Case3,
        kernel: Kernel::cubic(),
        sigma: 0.1,
        seed: 11,
        method: MethodSpec::All,
        n_list: vec![2000],
        repeats: 5,
        n_points: 100,
        lambda: 1e-6,
    };
    let all_rows = timing_sweep(&all).unwrap();
    println!("ALL n=2000: {:.4}s", all_rows[0].seconds);
    println!("ALL / EIGEN ratio at n=2000 = {:.1}", all_rows[0].seconds / rows[0].seconds);
}
