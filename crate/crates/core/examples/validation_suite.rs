//! Runs the validation suite on a seeded batch and prints each check.

use percolab::experiments::{run_validation_suite, Experiment, RunConfig};

fn main() -> percolab::Result<()> {
    let config = RunConfig { experiment: Experiment::Validate, scale: 4, p_open: 0.98, samples: 6, ..RunConfig::default() };
    let record = run_validation_suite(&config)?;
    for c in &record.checks {
        println!("{} {:<32} {:.4e} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.detail);
    }
    println!("suite passed: {}", record.passed);
    Ok(())
}
