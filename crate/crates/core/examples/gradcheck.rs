//! Runs the finite-difference gradient suite, then corrupts one backward
//! rule to show that the suite catches it.
//!
//! ```text
//! cargo run --release --example gradcheck -- [op_to_corrupt]
//! ```

use macroformer::gradcheck::{run_suite, GradcheckOptions};
use macroformer::tensor::ALL_OPS;

fn main() -> macroformer::Result<()> {
    let fault_name = std::env::args().nth(1).unwrap_or_else(|| "softmax".into());
    let report = run_suite(&GradcheckOptions::default())?;
    print!("{}", report.render());
    println!(
        "{}: {} checks over {} layer families",
        if report.passed() { "all within tolerance" } else { "FAILURES" },
        report.results.len(),
        report.layer_families()
    );

    let fault = ALL_OPS.into_iter().find(|op| op.name() == fault_name).unwrap_or_else(|| {
        let names: Vec<&str> = ALL_OPS.iter().map(|op| op.name()).collect();
        panic!("unknown op {fault_name:?}; choose one of {}", names.join(", "))
    });
    let faulty = run_suite(&GradcheckOptions { fault: Some(fault), ..Default::default() })?;
    let caught: Vec<&str> = faulty.failures().map(|r| r.name.as_str()).collect();
    println!("with a corrupted {fault_name} backward rule, {} checks fail: {}", caught.len(), caught.join(", "));
    Ok(())
}
