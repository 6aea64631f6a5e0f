//! Central-difference check of the full training objective on a toy model.
//! An optional argument sets the seed.

use crvl::trainer::{grad_check, GradCheckConfig};

fn main() -> crvl::Result<()> {
    let mut cfg = GradCheckConfig::default();
    if let Some(seed) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.seed = seed;
    }
    let report = grad_check(&cfg)?;
    let mut worst = report.entries.clone();
    worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    for e in worst.iter().take(8) {
        println!(
            "{:<40} [{:>4}] analytic {:+.6e} numeric {:+.6e} rel {:.2e}",
            e.name, e.index, e.analytic, e.numeric, e.rel_error
        );
    }
    println!(
        "{} parameters, max relative error {:.3e}, {:.2}s",
        report.entries.len(),
        report.max_rel_error,
        report.seconds
    );
    Ok(())
}
