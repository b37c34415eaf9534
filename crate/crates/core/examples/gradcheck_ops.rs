//! Finite-difference check of every differentiable op in the registry.

use weakneg::autodiff::gradcheck::{finite_difference_check, registered_ops, GradCheckConfig};

pub fn main() -> weakneg::Result<()> {
    let cfg = GradCheckConfig::default();
    for op in registered_ops() {
        let report = finite_difference_check(op.name, None, &cfg, 10, 42)?;
        println!(
            "{:<24} max_rel_err={:.2e} checked={:<5} excluded={:<3} {}",
            report.name,
            report.max_rel_err,
            report.checked,
            report.excluded,
            if report.pass { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
