//! Finite-difference check of every analytic gradient, including the
//! loss-weight logits.

use joint_slu::trainer::{gradient_check, GradCheckConfig};

fn main() {
    let config = GradCheckConfig::default();
    let report = gradient_check(&config);
    for t in &report.tensors {
        println!(
            "{:<40} {:>6} entries  rel {:.2e}  abs {:.2e}  {}",
            t.name,
            t.entries,
            t.max_relative_error,
            t.max_abs_error,
            if t.passed { "ok" } else { "FAIL" }
        );
    }
    println!("max relative error {:.3e} (tolerance {:.0e})", report.max_relative_error, report.tolerance);
    if !report.passed {
        std::process::exit(1);
    }
}
