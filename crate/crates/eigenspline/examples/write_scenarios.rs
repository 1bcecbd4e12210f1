//! Regenerates the shipped desk-scale scenario files.

use eigenspline::simbench::{desk_scale_scenario, TestFunction};

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "scenarios".into());
    for (case, name) in [
        (TestFunction::Case1, "desk_case1.json"),
        (TestFunction::Case2, "desk_case2.json"),
        (TestFunction::Case3, "desk_case3.json"),
    ] {
        let scenario = desk_scale_scenario(case, 0.1, 20260810);
        let path = format!("{dir}/{name}");
        std::fs::write(&path, scenario.to_json()).unwrap();
        println!("wrote {path}");
    }
}
