//! Runs the finite-difference gradient suite and prints one line per case.

use multibreath::verify::{gradient_suite, DEFAULT_SEEDS, DEFAULT_TOLERANCE};

fn main() -> multibreath::Result<()> {
    let filter = std::env::args().nth(1);
    let started = std::time::Instant::now();
    let report = gradient_suite(DEFAULT_SEEDS, DEFAULT_TOLERANCE, filter.as_deref())?;
    for line in report.lines() {
        println!("{line}");
    }
    println!(
        "{} cases, max relative error {:.3e}, {:.1}s",
        report.cases.len(),
        report.max_rel_error(),
        started.elapsed().as_secs_f64()
    );
    if !report.passed() {
        std::process::exit(3);
    }
    Ok(())
}
