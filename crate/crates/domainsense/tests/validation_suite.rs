//! Runs the oracle-backed validation suite end to end.
//!
//! The suite cross-checks the analytic machinery against finite
//! differences and Monte-Carlo perturbation, so this test is the crate's
//! broadest single correctness net.  A reduced sample count keeps it quick;
//! the tolerances still sit several sampling standard errors out.

use domainsense::validate::{run_all, ValidationConfig};

#[test]
fn all_checks_pass() {
    let config = ValidationConfig {
        mc_samples: 50_000,
        ..ValidationConfig::default()
    };
    let report = run_all(&config);
    let text = report.render_text();
    println!("{text}");
    assert!(report.all_passed(), "validation suite failed:\n{text}");
    assert_eq!(report.checks.len(), 8);
}

#[test]
fn injected_gradient_fault_is_caught() {
    let config = ValidationConfig {
        mc_samples: 1_000,
        inject_gradient_fault: true,
        ..ValidationConfig::default()
    };
    let report = run_all(&config);
    let gradient_check = report
        .checks
        .iter()
        .find(|c| c.name == "gradient_fd")
        .expect("gradient check present");
    assert!(
        !gradient_check.passed,
        "a corrupted gradient entry must fail the finite-difference check"
    );
}
