//! Finite-difference check of every loss term on micro instances.

use brainstr::trainer::gradcheck::gradcheck_suite;

fn main() -> brainstr::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let report = gradcheck_suite(seed, None)?;
    for c in &report.checks {
        let tag = if c.informational { " (surrogate, informational)" } else { "" };
        println!("{:<18} {:.3e} / {:.0e} over {} entries{tag}", c.term, c.max_rel_error, c.tolerance, c.entries);
    }
    println!("{}", if report.passed() { "all terms within tolerance" } else { "gradient mismatch" });
    Ok(())
}
